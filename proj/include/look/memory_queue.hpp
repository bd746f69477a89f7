#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "look/matrix.hpp"
#include "look/model.hpp"
#include "look/types.hpp"

namespace look {

/// Fixed-capacity FIFO ring of unit-norm embeddings with labels and
/// monotone insertion sequence numbers.
///
/// Occupied entries always live in slots [0, occupancy): the ring only starts
/// wrapping once it is full, at which point head() is the slot evicted next.
class MemoryQueue {
 public:
  static constexpr double kUnitNormTolerance = 1e-9;

  MemoryQueue(std::size_t capacity, std::size_t dim);

  /// Appends rows in order, evicting the oldest entries once full.
  /// Throws SizeError when n > capacity and ContractError on a non-unit row.
  void push_batch(const Matrix& embeddings, std::span<const Label> labels);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t occupancy() const { return occupancy_; }
  bool full() const { return occupancy_ == capacity_; }
  bool empty() const { return occupancy_ == 0; }
  std::size_t head() const { return head_; }
  /// Sequence number the next pushed row will receive.
  std::uint64_t next_seq() const { return next_seq_; }

  std::span<const double> embedding(std::size_t slot) const { return storage_.row(slot); }
  Label label(std::size_t slot) const { return labels_[slot]; }
  std::uint64_t seq(std::size_t slot) const { return seqs_[slot]; }

  /// Backing store, capacity x dim; rows at or past occupancy() are zero.
  const Matrix& storage() const { return storage_; }
  std::span<const Label> labels() const { return {labels_.data(), occupancy_}; }

  /// Occupied slots ordered oldest first.
  std::vector<std::size_t> slots_in_order() const;

  /// True when some stored entry has insert_seq >= seq.
  bool holds_seq_at_or_after(std::uint64_t seq) const;

 private:
  std::size_t capacity_;
  std::size_t dim_;
  Matrix storage_;
  std::vector<Label> labels_;
  std::vector<std::uint64_t> seqs_;
  std::size_t head_ = 0;
  std::size_t occupancy_ = 0;
  std::uint64_t next_seq_ = 0;
};

/// The k_eff = min(k, occupancy) closest queue entries to a query.
struct NeighborSet {
  std::vector<std::size_t> indices;   // queue slots
  std::vector<double> similarities;   // non-increasing
  std::vector<Label> labels;
  Matrix embeddings;                  // k_eff x dim, copies of the stored rows

  std::size_t size() const { return indices.size(); }
};

/// Exact top-k by cosine similarity; ties go to the older entry.
NeighborSet topk(const MemoryQueue& queue, std::span<const double> query, std::size_t k);

/// topk for every row of queries; similarities are computed as one product.
std::vector<NeighborSet> topk_batch(const MemoryQueue& queue, const Matrix& queries,
                                    std::size_t k);

/// queries x occupied entries similarity block.
Matrix queue_similarities(const MemoryQueue& queue, const Matrix& queries);

/// Given one similarity row over slots [0, occupancy), returns the chosen
/// slots ordered by (similarity desc, insert_seq asc).
std::vector<std::size_t> select_topk(const MemoryQueue& queue, std::span<const double> sims,
                                     std::size_t k);

struct Batch {
  Matrix x;
  std::vector<Label> y;
};

/// Pulls batches until the source returns nullopt.
using BatchSource = std::function<std::optional<Batch>()>;

/// Pushes momentum-branch embeddings of every streamed batch without touching
/// the parameters. Throws StateError when the stream yields nothing.
void prefill(MemoryQueue& queue, const ModelState& model, const BatchSource& stream);

/// CSV: insert_seq,label,e0..e{d-1}; oldest entry first.
void export_queue_csv(const MemoryQueue& queue, std::ostream& out);

}  // namespace look

#include "look/memory_queue.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>

#include "look/error.hpp"
#include "look/topk.hpp"

namespace look {

MemoryQueue::MemoryQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity),
      dim_(dim),
      storage_(capacity, dim),
      labels_(capacity, 0),
      seqs_(capacity, 0) {
  if (capacity == 0) throw ConfigError("queue capacity must be >= 1");
  if (dim == 0) throw ConfigError("queue embedding dim must be >= 1");
}

void MemoryQueue::push_batch(const Matrix& embeddings, std::span<const Label> labels) {
  const std::size_t n = embeddings.rows();
  if (n > capacity_) {
    throw SizeError("push of " + std::to_string(n) + " rows exceeds queue capacity " +
                    std::to_string(capacity_));
  }
  if (embeddings.cols() != dim_) {
    throw ShapeError("queue dim " + std::to_string(dim_) + " vs pushed rows of width " +
                     std::to_string(embeddings.cols()));
  }
  if (labels.size() != n) throw ShapeError("push_batch: label count != row count");
  for (std::size_t r = 0; r < n; ++r) {
    const double nrm = norm2(embeddings.row(r));
    if (!(std::abs(nrm - 1.0) <= kUnitNormTolerance)) {
      throw ContractError("push_batch: row " + std::to_string(r) + " has norm " +
                          std::to_string(nrm) + ", expected unit norm");
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t slot;
    if (occupancy_ < capacity_) {
      slot = occupancy_++;
    } else {
      slot = head_;
      head_ = (head_ + 1) % capacity_;
    }
    auto src = embeddings.row(r);
    std::copy(src.begin(), src.end(), storage_.row(slot).begin());
    labels_[slot] = labels[r];
    seqs_[slot] = next_seq_++;
  }
}

std::vector<std::size_t> MemoryQueue::slots_in_order() const {
  std::vector<std::size_t> out(occupancy_);
  for (std::size_t i = 0; i < occupancy_; ++i) out[i] = (head_ + i) % capacity_;
  return out;
}

bool MemoryQueue::holds_seq_at_or_after(std::uint64_t seq) const {
  for (std::size_t i = 0; i < occupancy_; ++i) {
    if (seqs_[i] >= seq) return true;
  }
  return false;
}

std::vector<std::size_t> select_topk(const MemoryQueue& queue, std::span<const double> sims,
                                     std::size_t k) {
  const std::size_t occ = queue.occupancy();
  if (sims.size() != occ) throw ShapeError("select_topk: similarity row length != occupancy");
  thread_local std::vector<double> scratch;
  return topk_indices(sims, k, [&](std::size_t slot) { return queue.seq(slot); }, scratch);
}

namespace {

NeighborSet make_set(const MemoryQueue& queue, std::span<const double> sims,
                     std::vector<std::size_t> slots) {
  NeighborSet s;
  s.embeddings = Matrix(slots.size(), queue.dim());
  s.similarities.reserve(slots.size());
  s.labels.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t slot = slots[i];
    s.similarities.push_back(sims[slot]);
    s.labels.push_back(queue.label(slot));
    auto src = queue.embedding(slot);
    std::copy(src.begin(), src.end(), s.embeddings.row(i).begin());
  }
  s.indices = std::move(slots);
  return s;
}

}  // namespace

NeighborSet topk(const MemoryQueue& queue, std::span<const double> query, std::size_t k) {
  if (queue.empty()) throw StateError("topk on an empty queue");
  if (query.size() != queue.dim()) throw ShapeError("topk: query dim != queue dim");
  std::vector<double> sims(queue.occupancy());
  for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = dot(query, queue.embedding(i));
  return make_set(queue, sims, select_topk(queue, sims, k));
}

Matrix queue_similarities(const MemoryQueue& queue, const Matrix& queries) {
  if (queries.cols() != queue.dim()) throw ShapeError("queue_similarities: dim mismatch");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Matrix out(queries.rows(), queue.occupancy());
  if (queue.occupancy() == 0 || queries.rows() == 0) return out;
  Eigen::Map<const RowMajor> q(queries.data(), queries.rows(), queries.cols());
  Eigen::Map<const RowMajor> keys(queue.storage().data(), queue.occupancy(), queue.dim());
  Eigen::Map<RowMajor> o(out.data(), out.rows(), out.cols());
  o.noalias() = q * keys.transpose();
  return out;
}

std::vector<NeighborSet> topk_batch(const MemoryQueue& queue, const Matrix& queries,
                                    std::size_t k) {
  if (queue.empty()) throw StateError("topk on an empty queue");
  const Matrix sims = queue_similarities(queue, queries);
  std::vector<NeighborSet> out;
  out.reserve(queries.rows());
  for (std::size_t r = 0; r < queries.rows(); ++r) {
    out.push_back(make_set(queue, sims.row(r), select_topk(queue, sims.row(r), k)));
  }
  return out;
}

void prefill(MemoryQueue& queue, const ModelState& model, const BatchSource& stream) {
  bool any = false;
  while (auto batch = stream()) {
    if (batch->x.rows() == 0) continue;
    any = true;
    const Matrix keys = forward_momentum(model, batch->x);
    // Oversized batches are pushed in capacity-sized chunks.
    for (std::size_t start = 0; start < keys.rows(); start += queue.capacity()) {
      const std::size_t n = std::min(queue.capacity(), keys.rows() - start);
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), start);
      queue.push_batch(keys.gather_rows(rows),
                       std::span<const Label>(batch->y).subspan(start, n));
    }
  }
  if (!any) throw StateError("prefill: empty data stream");
}

void export_queue_csv(const MemoryQueue& queue, std::ostream& out) {
  out << "insert_seq,label";
  for (std::size_t c = 0; c < queue.dim(); ++c) out << ",e" << c;
  out << '\n';
  char buf[32];
  for (std::size_t slot : queue.slots_in_order()) {
    out << queue.seq(slot) << ',' << queue.label(slot);
    for (double v : queue.embedding(slot)) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace look

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "look/matrix.hpp"
#include "look/types.hpp"

namespace look {

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct LabeledDataset {
  Matrix x;
  std::vector<Label> y;
  std::vector<Label> y_sub;  // empty when the source carries no sub-labels
  std::vector<Split> split;
  std::size_t num_classes = 0;
  std::size_t num_subclasses = 0;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  bool has_sublabels() const { return !y_sub.empty(); }

  std::vector<std::size_t> indices(Split s) const;
  /// Rows of `which`, keeping labels and split tags.
  LabeledDataset subset(std::span<const std::size_t> which) const;
  std::vector<Label> labels_at(std::span<const std::size_t> which) const;
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t subclasses_per_class = 3;
  std::size_t input_dim = 32;
  std::size_t samples_per_subclass = 8000;
  double sigma = 0.15;
  std::uint64_t center_seed = 7;
  /// One sub-class of every class is placed this many degrees from a
  /// sub-class of the next class; <= 0 disables the constraint.
  double proximity_degrees = 30.0;
  double test_fraction = 0.2;
  /// Fraction of the non-test part held out as validation (7:3 train/val).
  double val_fraction = 0.3;

  void validate() const;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Generator ground truth: one center per sub-class, sub-class s belongs to
/// class s / subclasses_per_class.
struct SyntheticTruth {
  Matrix centers;
  std::vector<Label> center_class;
  double sigma = 0.0;
};

struct SyntheticDataset {
  LabeledDataset data;
  SyntheticTruth truth;
};

SyntheticDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Accuracy of the Bayes classifier (known isotropic Gaussian mixture,
/// equal sub-class priors) on the given rows.
double bayes_accuracy(const SyntheticTruth& truth, const Matrix& x, std::span<const Label> labels,
                      bool subclass_task = false);

/// Stratified split per label: test_fraction to test, then the rest split
/// into train/val with val_fraction held out.
void assign_splits(LabeledDataset& ds, double test_fraction, double val_fraction,
                   std::uint64_t seed);

/// Downstream task on the same inputs: sub-labels become the labels, at most
/// `per_subclass` rows per sub-class are kept, and fresh stratified splits
/// are drawn.
LabeledDataset make_downstream_task(const LabeledDataset& ds, std::size_t per_subclass,
                                    double test_fraction, double val_fraction,
                                    std::uint64_t seed);

enum class DatasetFormat { kCsv, kLkbin };

DatasetFormat format_from_path(const std::string& path);

/// csv: header `label[,sublabel],f0..`; lkbin: "LKDS", u32 version, u64 N,
/// u32 d_in, u8 has_sublabel, f32 rows, i32 labels, i32 sub-labels.
/// Features are stored as 32-bit floats in both encodings.
void save_dataset(const LabeledDataset& ds, const std::string& path, DatasetFormat format);
LabeledDataset load_dataset(const std::string& path, DatasetFormat format);
void write_dataset(const LabeledDataset& ds, std::ostream& out, DatasetFormat format);
LabeledDataset read_dataset(std::istream& in, DatasetFormat format);

/// x + N(0, sigma^2) per coordinate, then each coordinate zeroed with
/// probability mask_rate.
std::vector<double> augment(std::span<const double> x, std::mt19937_64& rng, double sigma_aug,
                            double mask_rate);

/// Row-wise augment of a whole batch.
Matrix augment_rows(const Matrix& x, std::mt19937_64& rng, double sigma_aug, double mask_rate);

}  // namespace look

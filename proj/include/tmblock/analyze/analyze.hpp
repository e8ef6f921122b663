#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tmblock/net/network.hpp"
#include "tmblock/train/data.hpp"

namespace tmb::analyze {

/// One feature-map pixel of one image as seen by the template block.
struct PatchRecord {
  std::size_t image_index = 0;
  std::size_t y = 0;
  std::size_t x = 0;
  int true_label = 0;
  /// Argmax of this patch's scores (lowest index on ties).
  int predicted_label = 0;
  double entropy = 0.0;
  /// Soft-maxed patch scores.
  std::vector<double> scores;
  /// Mixing coefficients p-hat.
  std::vector<double> mixing;
  /// Embedding x'.
  std::vector<double> embedding;
  /// Raw patch scores before the soft-max.
  std::vector<double> logits;
};

/// -sum s log s with 0 log 0 = 0.
double entropy(std::span<const double> probabilities);

/// Picks `per_class` images of every class with a seeded shuffle and emits
/// one record per (image, pixel), ordered by (image_index, y, x). The network
/// must have a template block.
std::vector<PatchRecord> export_patches(net::Network& net, const train::Dataset& ds,
                                        std::size_t per_class, std::uint64_t seed,
                                        std::size_t batch_size = 100);

/// Columns: image_index,y,x,true_label,predicted_label,entropy,s_0..,m_0..,e_0..
/// and, with `with_logits`, l_0.. appended at the end.
std::string patches_csv(const std::vector<PatchRecord>& records, bool with_logits = false);

struct KMeansResult {
  Eigen::MatrixXd centers;  // k x dim
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  /// Inertia after every assignment step, then the final value.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  bool converged = false;
  bool monotone() const;
};

/// Lloyd iterations from k-means++ seeds (Euclidean). Stops at an assignment
/// fixpoint or after max_iter. An emptied cluster is moved onto the point
/// farthest from its current center. Rejects k larger than the number of
/// distinct points.
KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 300);

Eigen::MatrixXd score_matrix(const std::vector<PatchRecord>& records);

/// For each center, indices of the top_n records closest in score space;
/// equal distances keep record order.
std::vector<std::vector<std::size_t>> nearest_patches(const std::vector<PatchRecord>& records,
                                                      const Eigen::MatrixXd& centers,
                                                      std::size_t top_n);

struct Crop {
  std::size_t image_index = 0;
  std::size_t y = 0;
  std::size_t x = 0;
  /// Half-open input-pixel box after clipping.
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::size_t channels = 0;
  /// [channels, y1-y0, x1-x0] bytes.
  std::vector<std::uint8_t> pixels;
};

/// Where the template block sits relative to the input image.
struct CropGeometry {
  std::size_t map_h = 0, map_w = 0;
  std::size_t window_h = 0, window_w = 0;
  /// Product of the stage reductions before the block.
  std::size_t stride = 1;
  std::size_t image_h = 0, image_w = 0;

  static CropGeometry for_network(const net::NetConfig& cfg, std::size_t image_h,
                                  std::size_t image_w);
};

/// Input-space box of the pooling window around feature pixel (y, x):
/// rows [(y - (wh-1)/2) * stride, (y - (wh-1)/2 + wh) * stride), likewise
/// for columns, clipped to the image. Returns {y0, y1, x0, x1}.
std::array<std::size_t, 4> crop_box(const CropGeometry& g, std::size_t y, std::size_t x);

Crop crop_patch(const train::Dataset& ds, std::size_t image_index, std::size_t y, std::size_t x,
                const CropGeometry& g);

/// Columns: center,size,s_0..s_{d-1}.
std::string centers_csv(const KMeansResult& km);
/// Columns: center,rank,record,image_index,y,x,true_label,distance,y0,y1,x0,x1.
std::string nearest_csv(const std::vector<PatchRecord>& records, const KMeansResult& km,
                        const std::vector<std::vector<std::size_t>>& nearest,
                        const CropGeometry& g);

}  // namespace tmb::analyze

#include "tmblock/analyze/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tmblock/autodiff/ops.hpp"
#include "tmblock/config_text.hpp"
#include "tmblock/rng.hpp"

namespace tmb::analyze {

double entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double s : probabilities)
    if (s > 0.0) h -= s * std::log(s);
  return h;
}

std::vector<PatchRecord> export_patches(net::Network& net, const train::Dataset& ds,
                                        std::size_t per_class, std::uint64_t seed,
                                        std::size_t batch_size) {
  if (!net.has_block()) {
    throw std::invalid_argument("export_patches: the network has no template block");
  }
  if (batch_size == 0) batch_size = 1;
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < per_class) {
      throw std::invalid_argument("export_patches: class " + std::to_string(c) + " has only " +
                                  std::to_string(idx.size()) + " images, " +
                                  std::to_string(per_class) + " requested");
    }
    rng.shuffle(idx);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(chosen.begin(), chosen.end());

  std::vector<PatchRecord> records;
  for (std::size_t start = 0; start < chosen.size(); start += batch_size) {
    const std::size_t end = std::min(chosen.size(), start + batch_size);
    std::span<const std::size_t> idx(chosen.data() + start, end - start);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(ds.labels[i]);
    const auto r = net::forward_eval(net, train::to_input(ds, idx), labels);
    const auto& block = *r.result.block;
    const std::size_t c = block.patch_scores.dim(1), h = block.patch_scores.dim(2),
                      w = block.patch_scores.dim(3), dv = block.f_prime.dim(1);
    const auto scores = block.patch_scores.data();
    const auto mixing = block.mixing.data();
    const auto emb = block.f_prime.data();
    for (std::size_t n = 0; n < idx.size(); ++n) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          PatchRecord rec;
          rec.image_index = idx[n];
          rec.y = y;
          rec.x = x;
          rec.true_label = labels[n];
          const std::size_t pix = y * w + x;
          for (std::size_t k = 0; k < c; ++k) {
            rec.logits.push_back(scores[(n * c + k) * h * w + pix]);
            rec.mixing.push_back(mixing[(n * c + k) * h * w + pix]);
          }
          for (std::size_t k = 0; k < dv; ++k) rec.embedding.push_back(emb[(n * dv + k) * h * w + pix]);
          const double top = *std::max_element(rec.logits.begin(), rec.logits.end());
          double z = 0.0;
          for (double l : rec.logits) z += std::exp(l - top);
          for (double l : rec.logits) rec.scores.push_back(std::exp(l - top) / z);
          rec.predicted_label = static_cast<int>(
              std::max_element(rec.logits.begin(), rec.logits.end()) - rec.logits.begin());
          rec.entropy = entropy(rec.scores);
          records.push_back(std::move(rec));
        }
      }
    }
  }
  return records;
}

std::string patches_csv(const std::vector<PatchRecord>& records, bool with_logits) {
  std::ostringstream out;
  out << "image_index,y,x,true_label,predicted_label,entropy";
  if (!records.empty()) {
    const auto& r = records.front();
    for (std::size_t k = 0; k < r.scores.size(); ++k) out << ",s_" << k;
    for (std::size_t k = 0; k < r.mixing.size(); ++k) out << ",m_" << k;
    for (std::size_t k = 0; k < r.embedding.size(); ++k) out << ",e_" << k;
    if (with_logits)
      for (std::size_t k = 0; k < r.logits.size(); ++k) out << ",l_" << k;
  }
  out << '\n';
  for (const auto& r : records) {
    out << r.image_index << ',' << r.y << ',' << r.x << ',' << r.true_label << ','
        << r.predicted_label << ',' << format_double(r.entropy);
    for (double v : r.scores) out << ',' << format_double(v);
    for (double v : r.mixing) out << ',' << format_double(v);
    for (double v : r.embedding) out << ',' << format_double(v);
    if (with_logits)
      for (double v : r.logits) out << ',' << format_double(v);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// k-means

bool KMeansResult::monotone() const {
  for (std::size_t i = 1; i < inertia_history.size(); ++i) {
    const double prev = inertia_history[i - 1];
    if (inertia_history[i] > prev + 1e-12 * std::max(1.0, std::abs(prev))) return false;
  }
  return true;
}

namespace {

std::size_t distinct_rows(const Eigen::MatrixXd& pts) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(pts.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
      if (pts(a, j) != pts(b, j)) return pts(a, j) < pts(b, j);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t count = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size(); ++i) count += less(order[i - 1], order[i]) ? 1 : 0;
  return count;
}

double assign(const Eigen::MatrixXd& pts, const Eigen::MatrixXd& centers,
              std::vector<std::size_t>& labels, std::vector<double>& dist) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = (pts.row(i) - centers.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::size_t>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
    dist[static_cast<std::size_t>(i)] = best_d;
    total += best_d;
  }
  return total;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k == 0) throw std::invalid_argument("kmeans: k must be >= 1");
  if (k > n) {
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " exceeds the " +
                                std::to_string(n) + " points");
  }
  const std::size_t distinct = distinct_rows(points);
  if (k > distinct) {
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " exceeds the " +
                                std::to_string(distinct) + " distinct points");
  }

  // k-means++ seeding.
  Rng rng(seed);
  KMeansResult res;
  res.centers.resize(static_cast<Eigen::Index>(k), points.cols());
  res.centers.row(0) = points.row(static_cast<Eigen::Index>(rng.below(n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (points.row(static_cast<Eigen::Index>(i)) - res.centers.row(0)).squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (d2[i] > 0.0 && acc > target) {
        pick = i;
        break;
      }
    }
    if (pick == n) {
      // Rounding left the target past the last positive weight.
      for (std::size_t i = n; i-- > 0;)
        if (d2[i] > 0.0) {
          pick = i;
          break;
        }
    }
    res.centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) -
                               res.centers.row(static_cast<Eigen::Index>(c))).squaredNorm());
    }
  }

  res.assignments.assign(n, 0);
  std::vector<std::size_t> labels(n, 0);
  std::vector<double> dist(n, 0.0);
  bool first = true;
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    const double inertia = assign(points, res.centers, labels, dist);
    res.inertia_history.push_back(inertia);
    if (!first && labels == res.assignments) {
      res.converged = true;
      break;
    }
    first = false;
    res.assignments = labels;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(res.centers.rows(), res.centers.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(labels[i])) += points.row(static_cast<Eigen::Index>(i));
      ++counts[labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        res.centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its center.
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      res.centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(far));
      dist[far] = 0.0;
      res.assignments[far] = c;
    }
  }
  res.inertia = assign(points, res.centers, labels, dist);
  res.assignments = labels;
  res.inertia_history.push_back(res.inertia);
  return res;
}

Eigen::MatrixXd score_matrix(const std::vector<PatchRecord>& records) {
  if (records.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(records.size()),
                    static_cast<Eigen::Index>(records.front().scores.size()));
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < records[i].scores.size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = records[i].scores[j];
  return m;
}

std::vector<std::vector<std::size_t>> nearest_patches(const std::vector<PatchRecord>& records,
                                                      const Eigen::MatrixXd& centers,
                                                      std::size_t top_n) {
  const auto pts = score_matrix(records);
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(centers.rows()));
  const std::size_t take = std::min(top_n, records.size());
  std::vector<std::pair<double, std::size_t>> d(records.size());
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      d[i] = {(pts.row(static_cast<Eigen::Index>(i)) - centers.row(c)).squaredNorm(), i};
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end());
    for (std::size_t r = 0; r < take; ++r) out[static_cast<std::size_t>(c)].push_back(d[r].second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Crops

CropGeometry CropGeometry::for_network(const net::NetConfig& cfg, std::size_t image_h,
                                       std::size_t image_w) {
  if (!cfg.insert_block) throw std::invalid_argument("crop geometry needs a template block");
  CropGeometry g;
  g.image_h = image_h;
  g.image_w = image_w;
  std::size_t h = image_h, w = image_w;
  for (std::size_t i = 0; i <= cfg.insert_after(); ++i) {
    const std::size_t r = cfg.stages[i].reduction;
    h = ad::conv_output_extent(h, 3, r, ad::Padding::same);
    w = ad::conv_output_extent(w, 3, r, ad::Padding::same);
    g.stride *= r;
  }
  g.map_h = h;
  g.map_w = w;
  std::tie(g.window_h, g.window_w) = cfg.insert_block->window_for(h, w);
  return g;
}

std::array<std::size_t, 4> crop_box(const CropGeometry& g, std::size_t y, std::size_t x) {
  if (y >= g.map_h || x >= g.map_w) {
    throw std::out_of_range("crop: feature pixel (" + std::to_string(y) + "," + std::to_string(x) +
                            ") outside the " + std::to_string(g.map_h) + "x" +
                            std::to_string(g.map_w) + " map");
  }
  auto axis = [&](std::size_t p, std::size_t win, std::size_t limit) {
    const long lo = (static_cast<long>(p) - static_cast<long>((win - 1) / 2)) * static_cast<long>(g.stride);
    const long hi = lo + static_cast<long>(win * g.stride);
    return std::pair<std::size_t, std::size_t>{
        static_cast<std::size_t>(std::clamp<long>(lo, 0, static_cast<long>(limit))),
        static_cast<std::size_t>(std::clamp<long>(hi, 0, static_cast<long>(limit)))};
  };
  const auto [y0, y1] = axis(y, g.window_h, g.image_h);
  const auto [x0, x1] = axis(x, g.window_w, g.image_w);
  return {y0, y1, x0, x1};
}

Crop crop_patch(const train::Dataset& ds, std::size_t image_index, std::size_t y, std::size_t x,
                const CropGeometry& g) {
  if (image_index >= ds.size()) {
    throw std::out_of_range("crop: image index " + std::to_string(image_index) + " out of range");
  }
  Crop c;
  c.image_index = image_index;
  c.y = y;
  c.x = x;
  const auto box = crop_box(g, y, x);
  c.y0 = box[0];
  c.y1 = box[1];
  c.x0 = box[2];
  c.x1 = box[3];
  c.channels = ds.channels;
  const auto img = ds.image(image_index);
  for (std::size_t ch = 0; ch < ds.channels; ++ch)
    for (std::size_t yy = c.y0; yy < c.y1; ++yy)
      for (std::size_t xx = c.x0; xx < c.x1; ++xx)
        c.pixels.push_back(img[(ch * ds.height + yy) * ds.width + xx]);
  return c;
}

std::string centers_csv(const KMeansResult& km) {
  std::ostringstream out;
  out << "center,size";
  for (Eigen::Index j = 0; j < km.centers.cols(); ++j) out << ",s_" << j;
  out << '\n';
  std::vector<std::size_t> sizes(static_cast<std::size_t>(km.centers.rows()), 0);
  for (auto a : km.assignments) ++sizes[a];
  for (Eigen::Index c = 0; c < km.centers.rows(); ++c) {
    out << c << ',' << sizes[static_cast<std::size_t>(c)];
    for (Eigen::Index j = 0; j < km.centers.cols(); ++j) out << ',' << format_double(km.centers(c, j));
    out << '\n';
  }
  return out.str();
}

std::string nearest_csv(const std::vector<PatchRecord>& records, const KMeansResult& km,
                        const std::vector<std::vector<std::size_t>>& nearest,
                        const CropGeometry& g) {
  std::ostringstream out;
  out << "center,rank,record,image_index,y,x,true_label,distance,y0,y1,x0,x1\n";
  for (std::size_t c = 0; c < nearest.size(); ++c) {
    for (std::size_t r = 0; r < nearest[c].size(); ++r) {
      const std::size_t i = nearest[c][r];
      const auto& rec = records[i];
      double d = 0.0;
      for (std::size_t j = 0; j < rec.scores.size(); ++j) {
        const double diff = rec.scores[j] - km.centers(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
        d += diff * diff;
      }
      const auto box = crop_box(g, rec.y, rec.x);
      out << c << ',' << r << ',' << i << ',' << rec.image_index << ',' << rec.y << ',' << rec.x
          << ',' << rec.true_label << ',' << format_double(std::sqrt(d)) << ',' << box[0] << ','
          << box[1] << ',' << box[2] << ',' << box[3] << '\n';
    }
  }
  return out.str();
}

}  // namespace tmb::analyze

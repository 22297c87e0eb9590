#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "stlpd/anchors.hpp"
#include "stlpd/data.hpp"
#include "stlpd/loss.hpp"
#include "stlpd/net.hpp"

namespace stlpd {

struct Detection {
  float score = 0;
  BoxXYXY box;
  Quad quad;
};

struct TrainConfig {
  int epochs = 25;
  int batch_size = 8;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float lr_final = 1e-4f;  // cosine schedule endpoint
  uint64_t seed = 0;
  bool augment = true;
  int max_steps = 0;  // 0 = run all epochs
  NetConfig net;
  LossWeights loss_weights;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || lr < 0 || lr_final < 0 || momentum < 0 ||
        weight_decay < 0)
      throw std::invalid_argument("TrainConfig: numeric fields must be positive");
    net.validate();
  }
};

// ---------------------------------------------------------------------------
// CRC-32 (IEEE, reflected) for the weights container.
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return ~crc;
}

inline void put_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <class T>
inline void put_le(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(uint8_t(uint64_t(v) >> (8 * i)));
}

struct ByteReader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("weights file: truncated stream");
  }
  template <class T>
  T get_le() {
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(buf[pos + i]) << (8 * i);
    pos += sizeof(T);
    return T(v);
  }
  std::string get_str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

constexpr char kWeightsMagic[8] = {'S', 'T', 'L', 'P', 'D', 'W', '0', '1'};

}  // namespace detail

// Binary container: magic, u32 tensor count, then per tensor
// (u16 name length, name, u8 rank, u32 extents, f32 row-major data),
// and a trailing CRC-32 of everything before it. All integers little-endian.
// Named tensor streams, not tied to the model layout; the model config rides
// along as the reserved "_config" tensor.
inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, std::pair<std::vector<int>,
                                                                            std::vector<float>>>>& tensors) {
  std::vector<uint8_t> buf;
  detail::put_bytes(buf, detail::kWeightsMagic, 8);
  detail::put_le<uint32_t>(buf, uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le<uint16_t>(buf, uint16_t(name.size()));
    detail::put_bytes(buf, name.data(), name.size());
    buf.push_back(uint8_t(t.first.size()));
    for (int e : t.first) detail::put_le<uint32_t>(buf, uint32_t(e));
    for (float v : t.second) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_le<uint32_t>(buf, bits);
    }
  }
  detail::put_le<uint32_t>(buf, detail::crc32(buf.data(), buf.size()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_weights: cannot open " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!f) throw std::runtime_error("save_weights: short write to " + path);
}

inline std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> load_tensors(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_weights: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw std::runtime_error("weights file: truncated stream");
  const uint32_t stored = uint32_t(buf[buf.size() - 4]) | uint32_t(buf[buf.size() - 3]) << 8 |
                          uint32_t(buf[buf.size() - 2]) << 16 | uint32_t(buf[buf.size() - 1]) << 24;
  if (detail::crc32(buf.data(), buf.size() - 4) != stored)
    throw std::runtime_error("weights file: CRC mismatch");
  detail::ByteReader r{buf};
  if (r.get_str(8) != std::string(detail::kWeightsMagic, 8))
    throw std::runtime_error("weights file: bad magic");
  const uint32_t count = r.get_le<uint32_t>();
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> out;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t nlen = r.get_le<uint16_t>();
    std::string name = r.get_str(nlen);
    const uint8_t rank = r.get_le<uint8_t>();
    std::vector<int> shape;
    uint64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      shape.push_back(int(r.get_le<uint32_t>()));
      numel *= uint64_t(shape.back());
    }
    std::vector<float> data(numel);
    for (auto& v : data) {
      const uint32_t bits = r.get_le<uint32_t>();
      std::memcpy(&v, &bits, 4);
    }
    out.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }
  if (r.pos != buf.size() - 4) throw std::runtime_error("weights file: trailing bytes");
  return out;
}

inline void save_weights(const Model& m, const std::string& path) {
  std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<float>>>> tensors;
  const std::vector<float> cfg{
      m.config.backbone == Backbone::residual ? 0.0f : 1.0f,
      m.config.attention ? 1.0f : 0.0f,
      float(m.config.stage_channels[0]), float(m.config.stage_channels[1]),
      float(m.config.stage_channels[2]), float(m.config.stage_channels[3]),
      float(m.config.fpn_dim), float(m.config.anchors_per_cell), float(m.config.input_size)};
  tensors.emplace_back("_config", std::make_pair(std::vector<int>{int(cfg.size())}, cfg));
  for (const auto& [name, p] : m.params)
    tensors.emplace_back(name, std::make_pair(p.tensor.shape(), p.tensor.data()));
  save_tensors(path, tensors);
}

inline Model load_weights(const std::string& path) {
  auto tensors = load_tensors(path);
  auto cit = tensors.find("_config");
  if (cit == tensors.end() || cit->second.second.size() != 9)
    throw std::runtime_error("weights file: missing _config tensor");
  const auto& c = cit->second.second;
  NetConfig cfg;
  cfg.backbone = c[0] == 0.0f ? Backbone::residual : Backbone::lightweight;
  cfg.attention = c[1] != 0.0f;
  for (int i = 0; i < 4; ++i) cfg.stage_channels[size_t(i)] = int(c[size_t(2 + i)]);
  cfg.fpn_dim = int(c[6]);
  cfg.anchors_per_cell = int(c[7]);
  cfg.input_size = int(c[8]);
  Model m = build(cfg, 0);
  tensors.erase(cit);
  for (auto& [name, p] : m.params) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::runtime_error("weights file: missing tensor '" + name + "' for this config");
    if (it->second.first != p.tensor.shape())
      throw std::runtime_error("weights file: shape mismatch for '" + name + "'");
    p.tensor.data() = std::move(it->second.second);
    tensors.erase(it);
  }
  if (!tensors.empty())
    throw std::runtime_error("weights file: unknown tensor '" + tensors.begin()->first +
                             "' for this config");
  return m;
}

// ---------------------------------------------------------------------------
// Post-processing
// ---------------------------------------------------------------------------

// Greedy NMS, descending score, stable tie-break by input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold = 0.4f) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[size_t(a)].score > dets[size_t(b)].score; });
  std::vector<Detection> kept;
  for (int i : order) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(dets[size_t(i)].box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[size_t(i)]);
  }
  return kept;
}

namespace detail {

inline const AnchorSet& cached_anchors(int input_size, int anchors_per_cell) {
  static std::map<std::pair<int, int>, AnchorSet> cache;
  auto key = std::make_pair(input_size, anchors_per_cell);
  auto it = cache.find(key);
  if (it == cache.end()) {
    std::vector<float> scales{3.0f, 4.5f};
    scales.resize(size_t(anchors_per_cell), 4.5f);
    it = cache.emplace(key, generate_anchors(input_size, {8, 16, 32}, scales)).first;
  }
  return it->second;
}

inline Tensor batch_to_tensor(const std::vector<const Image*>& images, int size) {
  Tensor t = Tensor::zeros({int(images.size()), 3, size, size});
  float* d = t.data().data();
  for (size_t n = 0; n < images.size(); ++n) {
    const Image& im = *images[n];
    if (im.width != size || im.height != size)
      throw ShapeError("image size " + std::to_string(im.width) + "x" + std::to_string(im.height) +
                       " does not match network input " + std::to_string(size));
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          d[size_t(((n * 3 + c) * size + y) * size + x)] = im.at(y, x, c);
  }
  return t;
}

}  // namespace detail

inline std::vector<Detection> detect(const Model& m, const Image& image,
                                     float score_threshold = 0.02f, float nms_threshold = 0.4f) {
  const int size = m.config.input_size;
  Tensor input = detail::batch_to_tensor({&image}, size);
  PyramidMaps maps = forward(m, input);
  const AnchorSet& anchors = detail::cached_anchors(size, m.config.anchors_per_cell);
  std::vector<Detection> cands;
  for (int j = 0; j < anchors.count(); ++j) {
    const AnchorInfo& an = anchors.anchors[size_t(j)];
    const int l = an.level, cy = an.cell_y, cx = an.cell_x, k = an.index;
    const Tensor& sm = maps.score[size_t(l)];
    const float logit = sm.at(0, k, cy, cx);
    const float score = 1.0f / (1.0f + std::exp(-logit));
    if (score <= score_threshold) continue;
    const Tensor& bm = maps.box[size_t(l)];
    BoxOffsets off{bm.at(0, k * 4, cy, cx), bm.at(0, k * 4 + 1, cy, cx),
                   std::clamp(bm.at(0, k * 4 + 2, cy, cx), -8.0f, 8.0f),
                   std::clamp(bm.at(0, k * 4 + 3, cy, cx), -8.0f, 8.0f)};
    BoxXYXY box = to_xyxy(decode_box(off, an.box));
    BoxXYXY clamped;
    try {
      clamped = clamp_box(box, float(size), float(size));
    } catch (const std::invalid_argument&) {
      continue;  // fully outside the image
    }
    const Tensor& cm = maps.corner[size_t(l)];
    QuadOffsets qoff;
    for (int c = 0; c < 8; ++c) qoff.v[size_t(c)] = cm.at(0, k * 8 + c, cy, cx);
    Quad quad = decode_quad(qoff, an.box);
    for (auto& pt : quad.p) {
      pt[0] = std::clamp(pt[0], 0.0f, float(size));
      pt[1] = std::clamp(pt[1], 0.0f, float(size));
    }
    cands.push_back({score, clamped, quad});
  }
  return nms(cands, nms_threshold);
}

// ---------------------------------------------------------------------------
// Evaluation (top-1 protocol, accuracy at IoU > 0.7 by default)
// ---------------------------------------------------------------------------

struct TagStats {
  int total = 0;
  int correct = 0;
  int detected = 0;
  double iou_sum = 0;
  double corner_err_sum = 0;

  double accuracy() const { return total ? double(correct) / total : 0.0; }
  double mean_iou() const { return detected ? iou_sum / detected : 0.0; }
  double mean_corner_err() const { return detected ? corner_err_sum / detected : 0.0; }
};

struct Metrics {
  TagStats overall;
  std::map<std::string, TagStats> per_tag;
};

inline double normalized_corner_error(const Quad& pred, const Quad& gt, const BoxXYXY& gt_box) {
  const double diag = std::hypot(double(gt_box.x2 - gt_box.x1), double(gt_box.y2 - gt_box.y1));
  double sum = 0;
  for (int i = 0; i < 4; ++i)
    sum += std::hypot(double(pred.p[size_t(i)][0] - gt.p[size_t(i)][0]),
                      double(pred.p[size_t(i)][1] - gt.p[size_t(i)][1]));
  return sum / 4.0 / diag;
}

inline void accumulate_metric(Metrics& m, const std::string& tag,
                              const std::vector<Detection>& dets, const BoxXYXY& gt_box,
                              const Quad& gt_quad, float iou_threshold) {
  auto update = [&](TagStats& st) {
    st.total += 1;
    if (dets.empty()) return;
    st.detected += 1;
    const Detection& top = dets.front();
    const float v = iou(top.box, gt_box);
    st.iou_sum += v;
    st.corner_err_sum += normalized_corner_error(top.quad, gt_quad, gt_box);
    if (v > iou_threshold) st.correct += 1;
  };
  update(m.overall);
  update(m.per_tag[tag]);
}

inline Metrics evaluate(const Model& model, const std::vector<Sample>& dataset,
                        float iou_threshold = 0.7f, float score_threshold = 0.02f) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  Metrics m;
  for (const auto& s : dataset) {
    auto dets = detect(model, s.image, score_threshold);
    accumulate_metric(m, s.tag, dets, s.gt_box, s.gt_quad, iou_threshold);
  }
  return m;
}

inline std::string metrics_to_tsv(const Metrics& m) {
  char buf[256];
  std::string out = "tag\ttotal\taccuracy\tmean_iou\tmean_corner_err\n";
  auto row = [&](const std::string& tag, const TagStats& st) {
    std::snprintf(buf, sizeof buf, "%s\t%d\t%.4f\t%.4f\t%.4f\n", tag.c_str(), st.total,
                  st.accuracy(), st.mean_iou(), st.mean_corner_err());
    out += buf;
  };
  for (const auto& [tag, st] : m.per_tag) row(tag, st);
  row("overall", m.overall);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  Model model;
  std::string log;           // one line per step: step\tcls\tbox\tcorner\ttotal
  LossBreakdown final_loss;
};

inline TrainResult train(const TrainConfig& config, const std::vector<Sample>& dataset,
                         const std::function<void(int epoch, const Model&)>& on_epoch = {}) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& s : dataset)
    if (s.image.width != config.net.input_size || s.image.height != config.net.input_size)
      throw std::invalid_argument("train: dataset image size does not match the network input");

  TrainResult out;
  out.model = build(config.net, config.seed);
  const AnchorSet& anchors =
      detail::cached_anchors(config.net.input_size, config.net.anchors_per_cell);

  const int n = int(dataset.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const int total_steps = config.max_steps > 0
                              ? config.max_steps
                              : config.epochs * steps_per_epoch;
  Rng shuffle_rng(hash_combine(config.seed, 0x736875666cull));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  char line[160];
  int step = 0;
  for (int epoch = 0; epoch < config.epochs && step < total_steps; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(i + 1))]);
    for (int b = 0; b < steps_per_epoch && step < total_steps; ++b) {
      const int begin = b * config.batch_size;
      const int count = std::min(config.batch_size, n - begin);
      std::vector<Sample> batch;
      std::vector<const Image*> images;
      std::vector<Assignment> assigns;
      batch.reserve(size_t(count));
      for (int j = 0; j < count; ++j) {
        const Sample& src = dataset[size_t(order[size_t(begin + j)])];
        batch.push_back(config.augment
                            ? augment(src, hash_combine(config.seed, uint64_t(step) * 131 + j))
                            : src);
        images.push_back(&batch.back().image);
        assigns.push_back(assign(anchors, batch.back().gt_box, batch.back().gt_quad));
      }
      Tensor input = detail::batch_to_tensor(images, config.net.input_size);
      zero_grads(out.model.params);
      LossBreakdown lb;
      try {
        PyramidMaps maps = forward(out.model, input);
        lb = total_loss(maps, assigns, anchors, config.loss_weights);
        std::vector<Tensor> roots;
        for (int l = 0; l < 3; ++l) {
          roots.push_back(maps.score[size_t(l)]);
          roots.push_back(maps.box[size_t(l)]);
          roots.push_back(maps.corner[size_t(l)]);
        }
        backward_multi(roots);
      } catch (const NumericFault& e) {
        throw NumericFault("training aborted at step " + std::to_string(step + 1) + ": " +
                           e.what());
      }
      const float t = total_steps > 1 ? float(step) / float(total_steps - 1) : 0.0f;
      const float lr = config.lr_final +
                       0.5f * (config.lr - config.lr_final) * (1.0f + std::cos(3.14159265358979f * t));
      sgd_step(out.model.params, lr, config.momentum, config.weight_decay);
      ++step;
      std::snprintf(line, sizeof line, "%d\t%.6f\t%.6f\t%.6f\t%.6f\n", step, double(lb.cls),
                    double(lb.box), double(lb.corner), double(lb.total));
      out.log += line;
      out.final_loss = lb;
    }
    if (on_epoch) on_epoch(epoch, out.model);
  }
  return out;
}

}  // namespace stlpd

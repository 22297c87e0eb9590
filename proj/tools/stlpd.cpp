// stlpd: synthetic plate-scene tooling, training, evaluation, and detection.
//
// Exit codes: 0 success, 1 runtime/I/O failure, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stlpd/engine.hpp"

namespace fs = std::filesystem;
using namespace stlpd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int thread_budget() {
  const char* env = std::getenv("STLPD_THREADS");
  if (!env || !*env) return 1;
  const int n = std::atoi(env);
  return std::max(1, n);
}

// --------------------------------------------------------------------------
// Flag parsing: --key value pairs after the subcommand.
// --------------------------------------------------------------------------

struct Flags {
  std::map<std::string, std::string> kv;

  const std::string& get(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw UsageError("missing required flag --" + key);
    return it->second;
  }
  std::string get_or(const std::string& key, const std::string& dflt) const {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : it->second;
  }
  bool has(const std::string& key) const { return kv.count(key) != 0; }
};

Flags parse_flags(int argc, char** argv, int start, const std::vector<std::string>& allowed) {
  Flags f;
  for (int i = start; i < argc; ++i) {
    std::string a = argv[i];
    if (a.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + a + "'");
    a = a.substr(2);
    if (std::find(allowed.begin(), allowed.end(), a) == allowed.end())
      throw UsageError("unknown flag --" + a);
    if (i + 1 >= argc) throw UsageError("flag --" + a + " needs a value");
    f.kv[a] = argv[++i];
  }
  return f;
}

long parse_long(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("expected an integer for " + what + ", got '" + s + "'");
  }
}

float parse_float(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    const float v = std::stof(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("expected a number for " + what + ", got '" + s + "'");
  }
}

bool parse_bool(const std::string& s, const std::string& what) {
  if (s == "1" || s == "true" || s == "on") return true;
  if (s == "0" || s == "false" || s == "off") return false;
  throw UsageError("expected a boolean (0/1/true/false/on/off) for " + what + ", got '" + s + "'");
}

// --------------------------------------------------------------------------
// Config file: line-oriented `key = value`, '#' comments. Every key below has
// a documented default; unknown keys are errors so typos never pass silently.
// --------------------------------------------------------------------------

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string ctx = "config key '" + key + "'";
    if (key == "epochs")
      cfg.epochs = int(parse_long(val, ctx));
    else if (key == "batch_size")
      cfg.batch_size = int(parse_long(val, ctx));
    else if (key == "lr")
      cfg.lr = parse_float(val, ctx);
    else if (key == "lr_final")
      cfg.lr_final = parse_float(val, ctx);
    else if (key == "momentum")
      cfg.momentum = parse_float(val, ctx);
    else if (key == "weight_decay")
      cfg.weight_decay = parse_float(val, ctx);
    else if (key == "seed")
      cfg.seed = uint64_t(parse_long(val, ctx));
    else if (key == "augment")
      cfg.augment = parse_bool(val, ctx);
    else if (key == "max_steps")
      cfg.max_steps = int(parse_long(val, ctx));
    else if (key == "backbone") {
      if (val == "residual")
        cfg.net.backbone = Backbone::residual;
      else if (val == "lightweight")
        cfg.net.backbone = Backbone::lightweight;
      else
        throw UsageError("config key 'backbone': expected residual or lightweight, got '" + val +
                         "'");
    } else if (key == "attention")
      cfg.net.attention = parse_bool(val, ctx);
    else if (key == "stage_channels") {
      std::istringstream ss(val);
      std::string tok;
      for (int i = 0; i < 4; ++i) {
        if (!std::getline(ss, tok, ','))
          throw UsageError("config key 'stage_channels': expected four comma-separated values");
        cfg.net.stage_channels[size_t(i)] = int(parse_long(trim(tok), ctx));
      }
      if (std::getline(ss, tok, ','))
        throw UsageError("config key 'stage_channels': expected four comma-separated values");
    } else if (key == "fpn_dim")
      cfg.net.fpn_dim = int(parse_long(val, ctx));
    else if (key == "anchors_per_cell")
      cfg.net.anchors_per_cell = int(parse_long(val, ctx));
    else if (key == "input_size")
      cfg.net.input_size = int(parse_long(val, ctx));
    else if (key == "loss_cls")
      cfg.loss_weights.cls = parse_float(val, ctx);
    else if (key == "loss_box")
      cfg.loss_weights.box = parse_float(val, ctx);
    else if (key == "loss_corner")
      cfg.loss_weights.corner = parse_float(val, ctx);
    else
      throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return cfg;
}

std::string effective_config(const TrainConfig& c) {
  std::ostringstream o;
  o << "epochs = " << c.epochs << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "lr = " << c.lr << "\n"
    << "lr_final = " << c.lr_final << "\n"
    << "momentum = " << c.momentum << "\n"
    << "weight_decay = " << c.weight_decay << "\n"
    << "seed = " << c.seed << "\n"
    << "augment = " << (c.augment ? 1 : 0) << "\n"
    << "max_steps = " << c.max_steps << "\n"
    << "backbone = " << backbone_name(c.net.backbone) << "\n"
    << "attention = " << (c.net.attention ? 1 : 0) << "\n"
    << "stage_channels = " << c.net.stage_channels[0] << "," << c.net.stage_channels[1] << ","
    << c.net.stage_channels[2] << "," << c.net.stage_channels[3] << "\n"
    << "fpn_dim = " << c.net.fpn_dim << "\n"
    << "anchors_per_cell = " << c.net.anchors_per_cell << "\n"
    << "input_size = " << c.net.input_size << "\n"
    << "loss_cls = " << c.loss_weights.cls << "\n"
    << "loss_box = " << c.loss_weights.box << "\n"
    << "loss_corner = " << c.loss_weights.corner << "\n";
  return o.str();
}

std::vector<Sample> load_dataset(const std::string& dir) {
  std::vector<Sample> out;
  for (const auto& e : read_index(dir)) {
    Sample s;
    s.image = read_ppm(dir + "/" + e.path);
    s.gt_box = e.box;
    s.gt_quad = e.quad;
    s.tag = e.tag;
    s.source_id = out.size();
    out.push_back(std::move(s));
  }
  return out;
}

// --------------------------------------------------------------------------
// Subcommands
// --------------------------------------------------------------------------

int cmd_synth(int argc, char** argv) {
  Flags f = parse_flags(argc, argv, 2, {"preset", "count", "size", "seed", "out"});
  const Preset& preset = preset_by_name(f.get_or("preset", "base"));
  const int count = int(parse_long(f.get_or("count", "16"), "--count"));
  const int size = int(parse_long(f.get_or("size", "64"), "--size"));
  const uint64_t seed = uint64_t(parse_long(f.get_or("seed", "0"), "--seed"));
  const std::string out = f.get("out");
  if (count < 0) throw UsageError("--count must be nonnegative");

  fs::create_directories(out);
  std::vector<Sample> samples(static_cast<size_t>(count));
  const int workers = std::min(thread_budget(), std::max(1, count));
  auto worker = [&](int w) {
    for (int i = w; i < count; i += workers)
      samples[size_t(i)] = synth_sample(preset, hash_combine(seed, uint64_t(i)), size);
  };
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }

  std::vector<IndexEntry> entries;
  char name[64];
  for (int i = 0; i < count; ++i) {
    std::snprintf(name, sizeof name, "%s_%06d.ppm", preset.name.c_str(), i);
    write_ppm(out + "/" + name, samples[size_t(i)].image);
    IndexEntry entry{name, samples[size_t(i)].gt_box, samples[size_t(i)].gt_quad,
                     samples[size_t(i)].tag};
    entries.push_back(std::move(entry));
  }
  write_index(out, entries);
  std::cout << "wrote " << count << " samples to " << out << "\n";
  return 0;
}

int cmd_train(int argc, char** argv) {
  Flags f = parse_flags(argc, argv, 2, {"config", "data", "out"});
  TrainConfig cfg;
  if (f.has("config")) {
    std::ifstream in(f.get("config"));
    if (!in) throw std::runtime_error("cannot open config " + f.get("config"));
    cfg = parse_train_config(in);
  }
  const std::string out = f.get("out");
  std::vector<Sample> dataset = load_dataset(f.get("data"));

  std::cout << "# effective config\n" << effective_config(cfg);
  TrainResult r = train(cfg, dataset);

  fs::create_directories(out);
  save_weights(r.model, out + "/model.stlpd");
  std::ofstream log(out + "/train_log.tsv");
  if (!log) throw std::runtime_error("cannot open " + out + "/train_log.tsv");
  log << r.log;
  if (!log.flush()) throw std::runtime_error("short write to " + out + "/train_log.tsv");

  std::printf("final loss: cls %.6f box %.6f corner %.6f total %.6f\n", double(r.final_loss.cls),
              double(r.final_loss.box), double(r.final_loss.corner), double(r.final_loss.total));
  return 0;
}

int cmd_eval(int argc, char** argv) {
  Flags f = parse_flags(argc, argv, 2, {"model", "data", "report"});
  Model m = load_weights(f.get("model"));
  std::vector<Sample> dataset = load_dataset(f.get("data"));
  Metrics metrics = evaluate(m, dataset);
  const std::string tsv = metrics_to_tsv(metrics);
  if (f.has("report")) {
    std::ofstream rep(f.get("report"));
    if (!rep) throw std::runtime_error("cannot open report " + f.get("report"));
    rep << tsv;
  }
  std::cout << tsv;
  return 0;
}

int cmd_detect(int argc, char** argv) {
  Flags f = parse_flags(argc, argv, 2, {"model", "image", "out", "dump"});
  Model m = load_weights(f.get("model"));
  Image image = read_ppm(f.get("image"));
  auto dets = detect(m, image);

  if (f.has("dump")) {
    std::ofstream dump(f.get("dump"));
    if (!dump) throw std::runtime_error("cannot open dump " + f.get("dump"));
    char line[256];
    for (const auto& d : dets) {
      std::snprintf(line, sizeof line, "%.4f %.2f %.2f %.2f %.2f", double(d.score),
                    double(d.box.x1), double(d.box.y1), double(d.box.x2), double(d.box.y2));
      dump << line;
      for (const auto& pt : d.quad.p) {
        std::snprintf(line, sizeof line, " %.2f %.2f", double(pt[0]), double(pt[1]));
        dump << line;
      }
      dump << "\n";
    }
  }
  if (f.has("out")) {
    Image annotated = image;
    for (const auto& d : dets) {
      draw_box(annotated, d.box, 0.1f, 1.0f, 0.1f);
      for (const auto& pt : d.quad.p) draw_cross(annotated, pt[0], pt[1], 1.0f, 0.1f, 0.1f);
    }
    write_ppm(f.get("out"), annotated);
  }
  std::cout << dets.size() << " detection(s)\n";
  return 0;
}

int cmd_ccpd_index(int argc, char** argv) {
  Flags f = parse_flags(argc, argv, 2, {"dir", "out"});
  const std::string dir = f.get("dir");
  const std::string out = f.get_or("out", dir);
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);

  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jpg")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  std::vector<IndexEntry> entries;
  for (const auto& n : names) {
    CcpdAnnotation a;
    try {
      a = parse_ccpd_name(n);
    } catch (const CcpdParseError& e) {
      throw std::runtime_error("cannot parse '" + n + "': " + e.what());
    }
    IndexEntry e;
    e.path = n;
    e.box = {float(a.bbox[0].value), float(a.bbox[1].value), float(a.bbox[2].value),
             float(a.bbox[3].value)};
    e.quad = a.quad();
    e.tag = "ccpd";
    entries.push_back(std::move(e));
  }
  fs::create_directories(out);
  write_index(out, entries);
  std::cout << "indexed " << entries.size() << " file(s) into " << out << "\n";
  return 0;
}

// --------------------------------------------------------------------------
// selfcheck: quick re-run of the independent oracles so a deployed binary can
// prove its own numerics.
// --------------------------------------------------------------------------

// Count of grid-cell centers (pitch p) falling inside [lo, hi] along one axis.
long centers_inside(double lo, double hi, double pitch) {
  const long kmin = long(std::ceil(lo / pitch - 0.5 - 1e-12));
  const long kmax = long(std::floor(hi / pitch - 0.5 + 1e-12));
  return std::max(0l, kmax - kmin + 1);
}

double raster_iou(const BoxXYXY& a, const BoxXYXY& b, double pitch) {
  const double ix_lo = std::max(a.x1, b.x1), ix_hi = std::min(a.x2, b.x2);
  const double iy_lo = std::max(a.y1, b.y1), iy_hi = std::min(a.y2, b.y2);
  const long inter = (ix_lo < ix_hi && iy_lo < iy_hi)
                         ? centers_inside(ix_lo, ix_hi, pitch) * centers_inside(iy_lo, iy_hi, pitch)
                         : 0;
  const long ca = centers_inside(a.x1, a.x2, pitch) * centers_inside(a.y1, a.y2, pitch);
  const long cb = centers_inside(b.x1, b.x2, pitch) * centers_inside(b.y1, b.y2, pitch);
  const long uni = ca + cb - inter;
  return uni > 0 ? double(inter) / double(uni) : 0.0;
}

int cmd_selfcheck(int argc, char** argv) {
  parse_flags(argc, argv, 2, {});
  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "ok   " : "FAIL ") << what << "\n";
    if (!ok) ++failures;
  };

  // CIoU fixtures
  check(std::fabs(ciou_loss(BoxXYXY{0, 0, 2, 2}, BoxXYXY{0, 0, 2, 2}).value) < 1e-5f, "ciou identical");
  check(std::fabs(ciou_loss(BoxXYXY{0, 0, 2, 2}, BoxXYXY{2, 0, 4, 2}).value - 1.2f) < 1e-5f,
        "ciou adjacent");
  check(std::fabs(ciou_loss(BoxXYXY{0, 0, 2, 2}, BoxXYXY{0, 0, 4, 2}).value - 0.553249f) < 1e-5f,
        "ciou nested");

  // IoU vs rasterization oracle
  {
    Rng rng(2024);
    bool ok = true;
    for (int i = 0; i < 200 && ok; ++i) {
      auto rb = [&] {
        const float x1 = rng.uniform(0, 9), y1 = rng.uniform(0, 9);
        return BoxXYXY{x1, y1, x1 + rng.uniform(0.2f, 10.0f - x1),
                       y1 + rng.uniform(0.2f, 10.0f - y1)};
      };
      const BoxXYXY a = rb(), b = rb();
      if (std::fabs(double(iou(a, b)) - raster_iou(a, b, 0.005)) > 0.01) ok = false;
    }
    check(ok, "iou vs rasterization oracle (200 pairs)");
  }

  // finite differences through a conv + normalization stack
  {
    Rng rng(31);
    Tensor x = Tensor::zeros({1, 2, 5, 5}, true);
    Tensor w = Tensor::zeros({4, 2, 3, 3}, true);
    Tensor b = Tensor::zeros({4}, true);
    for (auto& v : x.data()) v = rng.normal();
    for (auto& v : w.data()) v = 0.5f * rng.normal();
    auto value = [&] {
      Tensor y = sum_all(relu_leaky(conv2d(x, w, b, 1, 1)));
      return y.data()[0];
    };
    Tensor y = sum_all(relu_leaky(conv2d(x, w, b, 1, 1)));
    backward(y);
    bool ok = true;
    for (Tensor* t : {&x, &w, &b}) {
      for (size_t i = 0; i < t->data().size() && ok; ++i) {
        const float keep = t->data()[i];
        t->data()[i] = keep + 1e-3f;
        const double up = value();
        t->data()[i] = keep - 1e-3f;
        const double dn = value();
        t->data()[i] = keep;
        const double fd = (up - dn) / 2e-3;
        if (std::fabs(double(t->grad()[i]) - fd) > 1e-2 * std::fabs(fd) + 2e-3) ok = false;
      }
    }
    check(ok, "conv2d gradient vs finite differences");
  }

  // NMS vs a direct quadratic pass
  {
    Rng rng(77);
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      std::vector<Detection> dets;
      for (int i = 0; i < 40; ++i) {
        const float x = rng.uniform(0, 40), y = rng.uniform(0, 40);
        dets.push_back({rng.uniform(0.01f, 0.99f), {x, y, x + rng.uniform(2, 15),
                                                    y + rng.uniform(2, 15)}, {}});
      }
      auto kept = nms(dets, 0.4f);
      // every kept pair overlaps below threshold, every dropped one overlaps
      // some stronger kept detection above it
      for (size_t i = 0; i < kept.size() && ok; ++i)
        for (size_t j = i + 1; j < kept.size(); ++j)
          if (iou(kept[i].box, kept[j].box) > 0.4f) ok = false;
      for (const auto& d : dets) {
        bool in_kept = false, covered = false;
        for (const auto& k : kept) {
          if (k.score == d.score && k.box.x1 == d.box.x1) in_kept = true;
          if (k.score >= d.score && iou(k.box, d.box) > 0.4f) covered = true;
        }
        if (!in_kept && !covered) ok = false;
      }
    }
    check(ok, "nms invariants (20 instances)");
  }

  // fresh model scores follow the focal prior
  {
    Model m = build(NetConfig{}, 3);
    Sample s = synth_sample(preset_by_name("base"), 1, 64);
    Tensor input = detail::batch_to_tensor({&s.image}, 64);
    PyramidMaps maps = forward(m, input);
    bool ok = true;
    for (int l = 0; l < 3; ++l)
      for (float v : maps.score[size_t(l)].data())
        if (std::fabs(1.0f / (1.0f + std::exp(-v)) - 0.01f) > 0.002f) ok = false;
    check(ok, "fresh-model score prior");
  }

  if (failures) {
    std::cerr << failures << " selfcheck failure(s)\n";
    return 1;
  }
  std::cout << "selfcheck passed\n";
  return 0;
}

const char* kUsage =
    "usage: stlpd <command> [flags]\n"
    "\n"
    "commands:\n"
    "  synth       --out DIR [--preset base] [--count 16] [--size 64] [--seed 0]\n"
    "  train       --data DIR --out DIR [--config FILE]\n"
    "  eval        --model FILE --data DIR [--report FILE]\n"
    "  detect      --model FILE --image FILE [--out FILE] [--dump FILE]\n"
    "  ccpd-index  --dir DIR [--out DIR]\n"
    "  selfcheck\n"
    "\n"
    "config file: `key = value` lines, '#' comments. Keys and defaults:\n"
    "  epochs=25 batch_size=8 lr=0.01 lr_final=0.0001 momentum=0.9\n"
    "  weight_decay=0.0005 seed=0 augment=1 max_steps=0\n"
    "  backbone=residual attention=1 stage_channels=8,16,32,64\n"
    "  fpn_dim=32 anchors_per_cell=2 input_size=64\n"
    "  loss_cls=1 loss_box=2 loss_corner=1\n"
    "\n"
    "env: STLPD_THREADS caps worker threads (default 1).\n";

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string cmd = argv[1];
  try {
    if (cmd == "synth") return cmd_synth(argc, argv);
    if (cmd == "train") return cmd_train(argc, argv);
    if (cmd == "eval") return cmd_eval(argc, argv);
    if (cmd == "detect") return cmd_detect(argc, argv);
    if (cmd == "ccpd-index") return cmd_ccpd_index(argc, argv);
    if (cmd == "selfcheck") return cmd_selfcheck(argc, argv);
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      std::cout << kUsage;
      return 0;
    }
    std::cerr << "unknown command '" << cmd << "'\n" << kUsage;
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

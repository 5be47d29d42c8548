// Copyright 2026 The PBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pbr/harness.hpp"

#include <openssl/evp.h>

#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "pbr/checkpoint.hpp"
#include "pbr/config.hpp"
#include "pbr/error.hpp"
#include "pbr/evalkit.hpp"
#include "pbr/parallel.hpp"
#include "pbr/plots.hpp"

#ifndef PBR_VERSION
#define PBR_VERSION "dev"
#endif

namespace pbr {
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

const char* const kPalette[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
                                "#46f0f0"};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json base_meta(const std::string& command, std::uint64_t seed) {
  Json j;
  j["command"] = command;
  j["seed"] = seed;
  j["started_utc"] = utc_now();
  j["versions"] = {{"pbr", PBR_VERSION},
                   {"compiler", __VERSION__},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  j["threads"] = worker_count();
  return j;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void check_dataset(const Dataset& data, const DetectorConfig& cfg, const std::string& what) {
  for (std::size_t i = 0; i < data.annotations.size(); ++i) {
    const auto& a = data.annotations[i];
    if (a.width != cfg.image_size || a.height != cfg.image_size) {
      throw InvalidArgument(what + " image " + a.file_name + " is " + std::to_string(a.width) +
                            "x" + std::to_string(a.height) + ", config expects " +
                            std::to_string(cfg.image_size));
    }
    for (const auto& o : a.objects) {
      if (o.category_id >= cfg.num_categories) {
        throw InvalidArgument(what + " image " + a.file_name + " has category " +
                              std::to_string(o.category_id) + " >= model.num_categories");
      }
    }
  }
}

std::vector<std::string> dataset_names(const Dataset& data, int num_categories) {
  std::vector<std::string> names = data.categories;
  for (int c = static_cast<int>(names.size()); c < num_categories; ++c) {
    names.push_back("category" + std::to_string(c));
  }
  names.resize(num_categories);
  return names;
}

int cmd_synth(const fs::path& out, int train_n, int val_n, std::uint64_t seed, SceneSpec spec) {
  const auto start = Clock::now();
  spec.validate();
  fs::create_directories(out);
  spec.seed = seed;
  write_dataset(out / "train", generate_split(spec, train_n));
  spec.seed = seed + 1;
  write_dataset(out / "val", generate_split(spec, val_n));

  Json echo;
  echo["command"] = "synth";
  echo["train"] = train_n;
  echo["val"] = val_n;
  echo["seed"] = seed;
  echo["image_size"] = spec.width;
  echo["min_objects"] = spec.min_objects;
  echo["max_objects"] = spec.max_objects;
  echo["min_scale"] = spec.min_scale;
  echo["max_scale"] = spec.max_scale;
  echo["noise"] = spec.noise;
  echo["max_pair_iou"] = spec.max_pair_iou;
  write_json_file(out / "config_echo.json", echo);
  Json meta = base_meta("synth", seed);
  meta["timings"] = {{"total_s", seconds_since(start)}};
  write_json_file(out / "run_meta.json", meta);
  std::cout << "wrote " << train_n << " train and " << val_n << " val scenes to " << out.string()
            << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& config_path, const fs::path& out) {
  const auto start = Clock::now();
  const RunConfig config = load_run_config(config_path);
  const DetectorConfig& cfg = config.detector;
  const Dataset train_data = read_dataset(config.train_data);
  const Dataset val_data = read_dataset(config.val_data);
  check_dataset(train_data, cfg, "train");
  check_dataset(val_data, cfg, "val");

  fs::create_directories(out);
  Json echo = to_json(config);
  echo["train_data"] = fs::absolute(config.train_data).lexically_normal().string();
  echo["val_data"] = fs::absolute(config.val_data).lexically_normal().string();
  write_json_file(out / "config_echo.json", echo);

  const auto train_set = load_scenes(train_data);
  const auto val_set = load_scenes(val_data);
  const double load_s = seconds_since(start);

  Detector detector(cfg);
  const auto train_start = Clock::now();
  TrainCallbacks callbacks;
  callbacks.on_epoch = [&](const TrainLogRow& r) {
    std::cerr << "epoch " << r.epoch << " step " << r.step << " loss " << fmt("%.4f", r.loss_total)
              << " cls " << fmt("%.4f", r.loss_cls) << " box " << fmt("%.4f", r.loss_box);
    for (std::size_t t = 0; t < r.loss_refine.size(); ++t) {
      std::cerr << " ref" << t + 2 << " " << fmt("%.4f", r.loss_refine[t]);
    }
    for (std::size_t t = 0; t < r.miou.size(); ++t) {
      std::cerr << " miou" << t + 1 << " " << fmt("%.4f", r.miou[t]);
    }
    std::cerr << " (" << fmt("%.0f", seconds_since(train_start)) << "s)\n";
  };
  const auto rows = train(detector, train_set, val_set, out, callbacks);
  write_json_file(out / "checkpoint" / "config.json", to_json(cfg));

  Json meta = base_meta("train", cfg.seed);
  meta["timings"] = {{"load_s", load_s},
                     {"train_s", seconds_since(train_start)},
                     {"total_s", seconds_since(start)}};
  meta["epochs"] = rows.size();
  meta["parameters"] = detector.params().total_values();
  meta["weights_sha256"] = sha256_file(out / "checkpoint" / "weights.bin");
  write_json_file(out / "run_meta.json", meta);
  std::cout << "checkpoint: " << (out / "checkpoint").string() << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& ckpt_arg, const fs::path& data_dir, const fs::path& out) {
  const auto start = Clock::now();
  const fs::path ckpt = resolve_checkpoint(ckpt_arg);
  const Detector detector = load_detector(ckpt);
  const Dataset data = read_dataset(data_dir);
  check_dataset(data, detector.config(), "eval");

  fs::create_directories(out);
  Json echo;
  echo["command"] = "eval";
  echo["ckpt"] = fs::absolute(ckpt).lexically_normal().string();
  echo["data"] = fs::absolute(data_dir).lexically_normal().string();
  echo["detector"] = to_json(detector.config());
  write_json_file(out / "config_echo.json", echo);

  std::vector<StagedImage> images(data.annotations.size());
  const auto infer_start = Clock::now();
  parallel_for(images.size(), [&](std::size_t i) {
    images[i].dets = detector.infer(data.load_image(i));
    images[i].gts = data.annotations[i].objects;
  });
  const double infer_s = seconds_since(infer_start);
  const EvalReport report =
      evaluate(images, dataset_names(data, detector.config().num_categories));
  write_report(out, report);

  Json meta = base_meta("eval", detector.config().seed);
  meta["timings"] = {{"infer_s", infer_s}, {"total_s", seconds_since(start)}};
  meta["images"] = images.size();
  write_json_file(out / "run_meta.json", meta);

  std::cout << "mAP " << fmt("%.4f", report.map) << " AP50 " << fmt("%.4f", report.ap50)
            << " AP75 " << fmt("%.4f", report.ap75) << "\n";
  for (std::size_t t = 0; t < report.stages.size(); ++t) {
    std::cout << "stage " << t + 1 << " mAP " << fmt("%.4f", report.stages[t].map) << " AP75 "
              << fmt("%.4f", report.stages[t].ap75);
    if (t < report.stage_iou.mean_iou.size()) {
      std::cout << " mean IoU " << fmt("%.4f", report.stage_iou.mean_iou[t]);
    }
    std::cout << "\n";
  }
  return kExitOk;
}

int cmd_infer(const fs::path& ckpt_arg, const fs::path& image_path, const fs::path& out,
              double min_score) {
  const Detector detector = load_detector(resolve_checkpoint(ckpt_arg));
  const Image image = read_ppm(image_path);
  const auto dets = detector.infer(image);
  auto names = category_names();
  names.resize(detector.config().num_categories, "category");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::binary);
  f << detections_svg(image, dets, names, min_score);
  if (!f) throw IoError("failed to write " + out.string());
  for (const auto& d : dets) {
    if (d.score < min_score) continue;
    const Box& b = d.final_box();
    std::cout << names[d.category] << " " << fmt("%.3f", d.score) << " [" << fmt("%.1f", b.x1)
              << ", " << fmt("%.1f", b.y1) << ", " << fmt("%.1f", b.x2) << ", "
              << fmt("%.1f", b.y2) << "]\n";
  }
  return kExitOk;
}

int cmd_report(const fs::path& from, const fs::path& out, const fs::path& log_arg) {
  std::optional<EvalReport> report;
  if (fs::exists(from / "report.json")) {
    report = read_report(from / "report.json");
  } else {
    std::cerr << "warning: " << (from / "report.json").string()
              << " not found, emitting placeholders\n";
  }
  fs::path log = log_arg;
  if (log.empty() && fs::exists(from / "train_log.csv")) log = from / "train_log.csv";
  if (log.empty() && fs::exists(from / "config_echo.json")) {
    const Json echo = read_json_file(from / "config_echo.json");
    if (echo.contains("ckpt")) {
      const fs::path candidate = fs::path(echo["ckpt"].get<std::string>()).parent_path() /
                                 "train_log.csv";
      if (fs::exists(candidate)) log = candidate;
    }
  }
  std::vector<TrainLogRow> rows;
  if (!log.empty()) rows = read_train_log(log);
  emit_plots(out, report, rows);
  std::cout << "wrote stage_iou.svg, pr_curves.svg, loss.svg to " << out.string() << "\n";
  return kExitOk;
}

}  // namespace

fs::path resolve_checkpoint(const fs::path& path) {
  if (fs::exists(path / "checkpoint" / "manifest.json")) return path / "checkpoint";
  if (fs::exists(path / "manifest.json")) return path;
  throw IoError("no checkpoint found at " + path.string());
}

Detector load_detector(const fs::path& checkpoint) {
  Detector detector(parse_detector_config(read_json_file(checkpoint / "config.json")));
  apply_checkpoint(load_checkpoint(checkpoint), detector.params());
  return detector;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string encode_bmp(const Image& image) {
  const int row = (image.width * 3 + 3) / 4 * 4;
  const std::uint32_t pixels = static_cast<std::uint32_t>(row * image.height);
  std::string out(54 + pixels, '\0');
  auto put32 = [&](std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out[at + i] = static_cast<char>((v >> (8 * i)) & 0xff);
  };
  out[0] = 'B';
  out[1] = 'M';
  put32(2, 54 + pixels);
  put32(10, 54);
  put32(14, 40);
  put32(18, static_cast<std::uint32_t>(image.width));
  put32(22, static_cast<std::uint32_t>(image.height));
  out[26] = 1;
  out[28] = 24;
  put32(34, pixels);
  for (int y = 0; y < image.height; ++y) {
    const std::size_t dst = 54 + static_cast<std::size_t>(image.height - 1 - y) * row;
    for (int x = 0; x < image.width; ++x) {
      const Rgb p = image.pixel(x, y);
      out[dst + 3 * x] = static_cast<char>(p[2]);
      out[dst + 3 * x + 1] = static_cast<char>(p[1]);
      out[dst + 3 * x + 2] = static_cast<char>(p[0]);
    }
  }
  return out;
}

std::string base64(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string detections_svg(const Image& image, const std::vector<Detection>& dets,
                           const std::vector<std::string>& names, double min_score) {
  const int scale = 4;
  const int w = image.width * scale, h = image.height * scale;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << image.width << " " << image.height
    << "\" font-family=\"sans-serif\">\n"
    << "<image width=\"" << image.width << "\" height=\"" << image.height
    << "\" style=\"image-rendering:pixelated\" href=\"data:image/bmp;base64,"
    << base64(encode_bmp(image)) << "\"/>\n";
  for (const auto& d : dets) {
    if (d.score < min_score) continue;
    const char* color = kPalette[d.category % 6];
    auto rect = [&](const Box& b, const char* extra) {
      s << "<rect x=\"" << fmt("%.2f", b.x1) << "\" y=\"" << fmt("%.2f", b.y1) << "\" width=\""
        << fmt("%.2f", b.width()) << "\" height=\"" << fmt("%.2f", b.height())
        << "\" fill=\"none\" stroke=\"" << color << "\"" << extra << "/>\n";
    };
    if (d.stage_boxes.size() > 1) rect(d.stage_boxes.front(), " stroke-width=\"0.3\" stroke-dasharray=\"1,1\"");
    rect(d.final_box(), " stroke-width=\"0.6\"");
    s << "<text x=\"" << fmt("%.2f", d.final_box().x1) << "\" y=\""
      << fmt("%.2f", std::max(4.0, d.final_box().y1 - 1)) << "\" font-size=\"4\" fill=\""
      << color << "\">" << names.at(d.category) << " " << fmt("%.2f", d.score) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

int run(const std::vector<std::string>& args, const HarnessHooks& hooks) {
  CLI::App app{"Pyramidal box refinement detector (desk scale)", "pbr"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate train/val synthetic datasets");
  fs::path synth_out;
  int train_n = 800, val_n = 200;
  std::uint64_t seed = 1;
  SceneSpec spec;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--train", train_n, "Train scenes")->check(CLI::NonNegativeNumber);
  synth->add_option("--val", val_n, "Validation scenes")->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", seed, "Train seed; validation uses seed + 1");
  synth->add_option("--noise", spec.noise, "Uniform noise amplitude");

  auto* train_cmd = app.add_subcommand("train", "Train a detector from a JSON config");
  fs::path config_path, train_out;
  train_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  fs::path eval_ckpt, eval_data, eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint or training output directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Report directory")->required();

  auto* infer = app.add_subcommand("infer", "Detect objects in one PPM image");
  fs::path infer_ckpt, infer_image, infer_out;
  double min_score = 0.3;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint or training output directory")->required();
  infer->add_option("--image", infer_image, "Input image (binary PPM)")->required();
  infer->add_option("--out", infer_out, "Output SVG")->required();
  infer->add_option("--min-score", min_score, "Smallest score drawn");

  auto* report = app.add_subcommand("report", "Emit SVG plots from an eval directory");
  fs::path report_from, report_out, report_log;
  report->add_option("--from", report_from, "Eval output directory")->required();
  report->add_option("--out", report_out, "Plot directory")->required();
  report->add_option("--log", report_log, "Training log (train_log.csv)");

  auto* selftest = app.add_subcommand("selftest", "Run the oracle and invariant suite");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    if (*synth) return cmd_synth(synth_out, train_n, val_n, seed, spec);
    if (*train_cmd) return cmd_train(config_path, train_out);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_out);
    if (*infer) return cmd_infer(infer_ckpt, infer_image, infer_out, min_score);
    if (*report) return cmd_report(report_from, report_out, report_log);
    if (*selftest) {
      if (!hooks.selftest) {
        std::cerr << "error: selftest suite not linked into this binary\n";
        return kExitFailure;
      }
      return hooks.selftest(std::cout);
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitInvalid;
}

}  // namespace pbr

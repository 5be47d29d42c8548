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


#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "pbr/checkpoint.hpp"
#include "pbr/config.hpp"
#include "pbr/error.hpp"
#include "pbr/harness.hpp"
#include "pbr/plots.hpp"

using namespace pbr;
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pbr_harness_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string expect_parse_error(const Json& doc) {
  try {
    parse_run_config(doc);
  } catch (const ParseError& e) {
    return e.where();
  }
  FAIL("config was accepted");
  return {};
}

Json tiny_run(const fs::path& data) {
  Json doc = to_json(RunConfig{});
  doc["val_images"] = 2;
  doc["model"]["channels"] = 8;
  doc["model"]["head_hidden"] = 16;
  doc["optim"]["batch_size"] = 4;
  doc["optim"]["epochs"] = 1;
  doc["train_data"] = (data / "train").string();
  doc["val_data"] = (data / "val").string();
  return doc;
}

int run_quiet(const std::vector<std::string>& args, const HarnessHooks& hooks = {}) {
  return run(args, hooks);
}

}  // namespace

TEST_CASE("config rejects unknown keys with their JSON path") {
  Json doc = to_json(RunConfig{});
  doc["optim"]["lrr"] = 0.1;
  CHECK(expect_parse_error(doc) == "$.optim.lrr");

  doc = to_json(RunConfig{});
  doc["infer"]["grid"]["strides"] = 4;
  CHECK(expect_parse_error(doc) == "$.infer.grid.strides");

  doc = to_json(RunConfig{});
  doc["extra"] = true;
  CHECK(expect_parse_error(doc) == "$.extra");
}

TEST_CASE("config rejects out-of-range and mistyped values") {
  Json doc = to_json(RunConfig{});
  doc["optim"]["lr"] = -0.1;
  CHECK(expect_parse_error(doc) == "$.optim.lr");

  doc = to_json(RunConfig{});
  doc["optim"]["momentum"] = "fast";
  CHECK(expect_parse_error(doc) == "$.optim.momentum");

  doc = to_json(RunConfig{});
  doc["model"]["image_size"] = 100;
  CHECK(expect_parse_error(doc) == "$.model.image_size");

  doc = to_json(RunConfig{});
  doc["refine"]["clamp"] = 0;
  CHECK(expect_parse_error(doc) == "$.refine.clamp");

  doc = to_json(RunConfig{});
  doc["model"]["mode"] = "boundary_areas_magic";
  CHECK(expect_parse_error(doc) == "$.model.mode");

  doc = to_json(RunConfig{});
  doc["refine"]["schedule"] = {0.5};
  CHECK(expect_parse_error(doc) == "$.refine.schedule");
}

TEST_CASE("config round trips through JSON") {
  RunConfig c;
  c.detector.mode = RefinementMode::kWholeProposalFc;
  c.detector.refine.clamp.reset();
  c.detector.optim.lr_steps = {3, 5, 7};
  c.detector.seed = 42;
  c.detector.infer.grid.scales = {10, 20};
  c.train_data = "/abs/train";
  const Json once = to_json(c);
  const RunConfig back = parse_run_config(once);
  CHECK(to_json(back) == once);
  CHECK(back.train_data == c.train_data);
  CHECK(!back.detector.refine.clamp.has_value());

  // Relative data paths resolve against the config's directory.
  Json rel = once;
  rel["train_data"] = "data/train";
  CHECK(parse_run_config(rel, "/cfg").train_data == fs::path("/cfg/data/train"));
}

TEST_CASE("cli exit codes") {
  const fs::path dir = scratch("exit");
  CHECK(run_quiet({}) == kExitInvalid);
  CHECK(run_quiet({"frobnicate"}) == kExitInvalid);
  CHECK(run_quiet({"synth"}) == kExitInvalid);
  CHECK(run_quiet({"synth", "--out", dir.string(), "--train", "-3"}) == kExitInvalid);
  CHECK(run_quiet({"--help"}) == kExitOk);

  HarnessHooks pass, fail;
  pass.selftest = [](std::ostream&) { return kExitOk; };
  fail.selftest = [](std::ostream&) { return kExitFailure; };
  CHECK(run_quiet({"selftest"}, pass) == kExitOk);
  CHECK(run_quiet({"selftest"}, fail) == kExitFailure);
  CHECK(run_quiet({"selftest"}) == kExitFailure);

  // Malformed config: invalid input. Missing dataset: runtime failure.
  std::ofstream(dir / "bad.json") << R"({"optim": {"lr": "x"}})";
  CHECK(run_quiet({"train", "--config", (dir / "bad.json").string(), "--out",
                   (dir / "o").string()}) == kExitInvalid);
  write_json_file(dir / "nodata.json", tiny_run(dir / "missing"));
  CHECK(run_quiet({"train", "--config", (dir / "nodata.json").string(), "--out",
                   (dir / "o").string()}) == kExitFailure);
  CHECK(run_quiet({"eval", "--ckpt", (dir / "none").string(), "--data", dir.string(), "--out",
                   (dir / "e").string()}) == kExitFailure);
}

TEST_CASE("synth, train, eval, infer and report end to end") {
  const fs::path dir = scratch("e2e");
  const fs::path data = dir / "data";
  REQUIRE(run_quiet({"synth", "--out", data.string(), "--train", "8", "--val", "4", "--seed",
                     "5"}) == kExitOk);
  CHECK(fs::exists(data / "train" / "annotations.json"));
  CHECK(fs::exists(data / "config_echo.json"));
  CHECK(fs::exists(data / "run_meta.json"));

  // Same seed, byte-identical annotations.
  REQUIRE(run_quiet({"synth", "--out", (dir / "data2").string(), "--train", "8", "--val", "4",
                     "--seed", "5"}) == kExitOk);
  CHECK(sha256_file(data / "train" / "annotations.json") ==
        sha256_file(dir / "data2" / "train" / "annotations.json"));

  // epochs = 0 writes the initialization.
  Json zero = tiny_run(data);
  zero["optim"]["epochs"] = 0;
  write_json_file(dir / "zero.json", zero);
  REQUIRE(run_quiet({"train", "--config", (dir / "zero.json").string(), "--out",
                     (dir / "zero").string()}) == kExitOk);
  {
    Detector init(parse_run_config(zero).detector);
    const Detector loaded = load_detector(dir / "zero" / "checkpoint");
    REQUIRE(loaded.params().size() == init.params().size());
    for (std::size_t i = 0; i < init.params().size(); ++i) {
      const auto& a = init.params().items()[i].value.data();
      const auto& b = loaded.params().items()[i].value.data();
      CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
  }

  write_json_file(dir / "tiny.json", tiny_run(data));
  REQUIRE(run_quiet({"train", "--config", (dir / "tiny.json").string(), "--out",
                     (dir / "run").string()}) == kExitOk);
  const Json meta = read_json_file(dir / "run" / "run_meta.json");
  CHECK(meta["seed"] == 1);
  CHECK(meta.contains("versions"));
  CHECK(meta["timings"].contains("train_s"));
  const std::string weights = sha256_file(dir / "run" / "checkpoint" / "weights.bin");
  CHECK(meta["weights_sha256"] == weights);
  CHECK(read_train_log(dir / "run" / "train_log.csv").size() == 1);

  // The echoed config alone reproduces the run.
  REQUIRE(run_quiet({"train", "--config", (dir / "run" / "config_echo.json").string(), "--out",
                     (dir / "rerun").string()}) == kExitOk);
  CHECK(sha256_file(dir / "rerun" / "checkpoint" / "weights.bin") == weights);

  REQUIRE(run_quiet({"eval", "--ckpt", (dir / "run").string(), "--data",
                     (data / "val").string(), "--out", (dir / "eval").string()}) == kExitOk);
  const EvalReport report = read_report(dir / "eval" / "report.json");
  CHECK(report.num_images == 4);
  CHECK(report.map >= 0.0);
  CHECK(report.map <= 1.0);

  const fs::path image = data / "val" / "images" / "000000.ppm";
  REQUIRE(fs::exists(image));
  REQUIRE(run_quiet({"infer", "--ckpt", (dir / "run").string(), "--image", image.string(),
                     "--out", (dir / "infer" / "dets.svg").string()}) == kExitOk);
  const std::string svg = slurp(dir / "infer" / "dets.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("data:image/bmp;base64,") != std::string::npos);

  REQUIRE(run_quiet({"report", "--from", (dir / "eval").string(), "--out",
                     (dir / "plots").string()}) == kExitOk);
  for (const char* name : {"stage_iou.svg", "pr_curves.svg", "loss.svg"}) {
    CHECK(fs::file_size(dir / "plots" / name) > 0);
  }
  // The log is found through the eval's checkpoint path.
  CHECK(slurp(dir / "plots" / "loss.svg").find("WARNING:") == std::string::npos);
}

TEST_CASE("stage IoU plot draws one bar per stage, taller for higher IoU") {
  EvalReport report;
  report.stage_iou.mean_iou = {0.80, 0.90, 0.95};
  report.stage_iou.matched = 12;
  const std::string svg = stage_iou_svg(report);
  CHECK(svg == stage_iou_svg(report));

  const std::regex bar(R"re(<rect x="[^"]*" y="[^"]*" width="[^"]*" height="([^"]*)" fill="#)re");
  std::vector<double> heights;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar); it != std::sregex_iterator();
       ++it) {
    heights.push_back(std::stod((*it)[1].str()));
  }
  REQUIRE(heights.size() == 3);
  CHECK(heights[0] < heights[1]);
  CHECK(heights[1] < heights[2]);
  CHECK(svg.find("B3 0.9500") != std::string::npos);
}

TEST_CASE("plots degrade to a warning placeholder") {
  CHECK(stage_iou_svg(std::nullopt).find("WARNING:") != std::string::npos);
  CHECK(pr_curves_svg(std::nullopt).find("WARNING:") != std::string::npos);
  CHECK(loss_svg({}).find("WARNING:") != std::string::npos);

  const fs::path dir = scratch("placeholder");
  CHECK(run_quiet({"report", "--from", dir.string(), "--out", (dir / "plots").string()}) ==
        kExitOk);
  CHECK(slurp(dir / "plots" / "stage_iou.svg").find("WARNING:") != std::string::npos);
}

TEST_CASE("digest and encoding helpers") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(base64("") == "");
  CHECK(base64("f") == "Zg==");
  CHECK(base64("fo") == "Zm8=");
  CHECK(base64("foo") == "Zm9v");
  CHECK(base64("foobar") == "Zm9vYmFy");

  Image img;
  img.width = 2;
  img.height = 1;
  img.rgb = {10, 20, 30, 40, 50, 60};
  const std::string bmp = encode_bmp(img);
  // 54-byte header, one row of 6 bytes padded to 8, stored BGR.
  REQUIRE(bmp.size() == 62);
  CHECK(bmp.substr(0, 2) == "BM");
  CHECK(static_cast<unsigned char>(bmp[54]) == 30);
  CHECK(static_cast<unsigned char>(bmp[55]) == 20);
  CHECK(static_cast<unsigned char>(bmp[56]) == 10);
  CHECK(static_cast<unsigned char>(bmp[57]) == 60);
  CHECK(bmp[60] == 0);
}

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

#include "pbr/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "pbr/error.hpp"

namespace pbr {
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Reads the members of one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const Json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ParseError(path, what);
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  const Json* get(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& dst, double lo, double hi, bool open_lo = false) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_number()) fail(at(key), "expected a number");
    const double x = v->get<double>();
    if (x < lo || x > hi || (open_lo && x == lo)) {
      std::ostringstream msg;
      msg << "value " << x << " outside " << (open_lo ? "(" : "[") << lo << ", " << hi << "]";
      fail(at(key), msg.str());
    }
    dst = x;
  }

  void integer(const std::string& key, int& dst, long lo, long hi) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_number_integer()) fail(at(key), "expected an integer");
    const long x = v->get<long>();
    if (x < lo || x > hi) {
      fail(at(key), "value " + std::to_string(x) + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
    dst = static_cast<int>(x);
  }

  void seed(const std::string& key, std::uint64_t& dst) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_number_unsigned()) fail(at(key), "expected a non-negative integer");
    dst = v->get<std::uint64_t>();
  }

  void boolean(const std::string& key, bool& dst) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_boolean()) fail(at(key), "expected true or false");
    dst = v->get<bool>();
  }

  void string(const std::string& key, std::string& dst) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_string()) fail(at(key), "expected a string");
    dst = v->get<std::string>();
  }

  void numbers(const std::string& key, std::vector<double>& dst, double lo, bool allow_empty) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_array()) fail(at(key), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      const std::string p = at(key) + "[" + std::to_string(i) + "]";
      if (!e.is_number()) fail(p, "expected a number");
      if (e.get<double>() <= lo) fail(p, "must be > " + std::to_string(lo));
      out.push_back(e.get<double>());
    }
    if (out.empty() && !allow_empty) fail(at(key), "must not be empty");
    dst = out;
  }

  void integers(const std::string& key, std::vector<int>& dst, int lo) {
    const Json* v = get(key);
    if (!v) return;
    if (!v->is_array()) fail(at(key), "expected an array of integers");
    std::vector<int> out;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      const std::string p = at(key) + "[" + std::to_string(i) + "]";
      if (!e.is_number_integer() || e.get<long>() < lo) {
        fail(p, "expected an integer >= " + std::to_string(lo));
      }
      out.push_back(e.get<int>());
    }
    dst = out;
  }

  std::optional<Reader> child(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    return Reader(*v, at(key));
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) fail(at(it.key()), "unknown key");
    }
  }

 private:
  const Json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_detector(Reader& r, DetectorConfig& c) {
  r.seed("seed", c.seed);
  r.boolean("hflip", c.hflip);
  r.integer("val_images", c.val_images, 0, 1000000);

  if (auto m = r.child("model")) {
    m->integer("image_size", c.image_size, 32, 4096);
    if (c.image_size % 32 != 0) Reader::fail(m->at("image_size"), "must be a multiple of 32");
    m->integer("channels", c.channels, 1, 1024);
    m->integer("num_categories", c.num_categories, 1, 1000);
    m->integer("head_hidden", c.head_hidden, 1, 65536);
    m->integer("attention_groups", c.attention_groups, 1, 1024);
    if (c.channels % c.attention_groups != 0) {
      Reader::fail(m->at("attention_groups"), "must divide model.channels");
    }
    m->integer("roi_out", c.roi.out, 1, 64);
    m->integer("roi_sampling", c.roi.sampling, 1, 16);
    if (const Json* v = m->get("mode")) {
      if (!v->is_string()) Reader::fail(m->at("mode"), "expected a string");
      try {
        c.mode = parse_refinement_mode(v->get<std::string>());
      } catch (const InvalidArgument& e) {
        Reader::fail(m->at("mode"), e.what());
      }
    }
    m->finish();
  }
  if (auto f = r.child("refine")) {
    f->integer("num_stages", c.refine.num_stages, 1, 16);
    if (const Json* v = f->get("clamp")) {
      if (v->is_null()) {
        c.refine.clamp.reset();
      } else if (v->is_number() && v->get<double>() > 0) {
        c.refine.clamp = v->get<double>();
      } else {
        Reader::fail(f->at("clamp"), "expected a number > 0 or null");
      }
    }
    f->numbers("schedule", c.refine.schedule, 0.0, true);
    for (std::size_t i = 0; i < c.refine.schedule.size(); ++i) {
      if (c.refine.schedule[i] > 1.0) {
        Reader::fail(f->at("schedule") + "[" + std::to_string(i) + "]", "must be <= 1");
      }
    }
    if (!c.refine.schedule.empty() &&
        c.refine.schedule.size() != static_cast<std::size_t>(c.refine.num_stages - 1)) {
      Reader::fail(f->at("schedule"), "needs one entry per refinement stage (num_stages - 1)");
    }
    f->number("side_norm", c.refine.side_norm, 0.0, kInf, true);
    f->finish();
  }
  if (auto l = r.child("levels")) {
    l->integer("k0", c.levels.k0, 0, 16);
    l->number("s0", c.levels.s0, 0.0, kInf, true);
    l->finish();
  }
  if (auto d = r.child("delta_norm")) {
    d->number("xy", c.delta_norm.xy, 0.0, kInf, true);
    d->number("wh", c.delta_norm.wh, 0.0, kInf, true);
    d->finish();
  }
  if (auto j = r.child("jitter")) {
    j->integer("positives_per_gt", c.jitter.positives_per_gt, 0, 1000);
    j->integer("negatives", c.jitter.negatives, 0, 10000);
    j->number("center", c.jitter.center, 0.0, 1.0);
    j->number("log_scale", c.jitter.log_scale, 0.0, 2.0);
    j->number("positive_iou", c.jitter.positive_iou, 0.0, 1.0, true);
    j->number("negative_iou", c.jitter.negative_iou, 0.0, 1.0, true);
    j->integer("max_tries", c.jitter.max_tries, 1, 100000);
    j->finish();
  }
  if (auto l = r.child("loss")) {
    l->number("cls", c.loss.cls, 0.0, kInf, true);
    l->number("box", c.loss.box, 0.0, kInf, true);
    l->number("refine", c.loss.refine, 0.0, kInf, true);
    l->number("beta", c.loss.beta, 0.0, kInf, true);
    l->finish();
  }
  if (auto o = r.child("optim")) {
    o->number("lr", c.optim.lr, 0.0, kInf);
    o->number("momentum", c.optim.momentum, 0.0, 1.0);
    o->number("weight_decay", c.optim.weight_decay, 0.0, kInf);
    o->integer("batch_size", c.optim.batch_size, 1, 4096);
    o->integer("epochs", c.optim.epochs, 0, 100000);
    o->integer("warmup_iters", c.optim.warmup_iters, 0, 100000000);
    o->number("warmup_ratio", c.optim.warmup_ratio, 0.0, 1.0);
    o->integers("lr_steps", c.optim.lr_steps, 1);
    o->number("gamma", c.optim.gamma, 0.0, 1.0);
    o->finish();
  }
  if (auto i = r.child("infer")) {
    i->number("score_thresh", c.infer.score_thresh, 0.0, 1.0);
    i->number("nms_iou", c.infer.nms_iou, 0.0, 1.0);
    i->integer("max_detections", c.infer.max_detections, 1, 100000);
    if (auto g = i->child("grid")) {
      g->number("stride", c.infer.grid.stride, 0.0, kInf, true);
      g->numbers("scales", c.infer.grid.scales, 0.0, false);
      g->numbers("ratios", c.infer.grid.ratios, 0.0, false);
      g->finish();
    }
    i->finish();
  }
}

}  // namespace

DetectorConfig parse_detector_config(const Json& doc) {
  Reader r(doc, "$");
  DetectorConfig c;
  read_detector(r, c);
  r.finish();
  c.validate();
  return c;
}

RunConfig parse_run_config(const Json& doc, const fs::path& base) {
  Reader r(doc, "$");
  RunConfig c;
  read_detector(r, c.detector);
  std::string train = c.train_data.string(), val = c.val_data.string();
  r.string("train_data", train);
  r.string("val_data", val);
  r.finish();
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base.empty() ? path : (base / path).lexically_normal();
  };
  c.train_data = resolve(train);
  c.val_data = resolve(val);
  c.detector.validate();
  return c;
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + " at byte " + std::to_string(e.byte), e.what());
  }
}

void write_json_file(const fs::path& path, const Json& doc) {
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
  if (!out) throw IoError("failed to write " + path.string());
}

RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(read_json_file(path), fs::absolute(path).parent_path());
}

Json to_json(const DetectorConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["hflip"] = c.hflip;
  j["val_images"] = c.val_images;
  j["model"] = {{"image_size", c.image_size},
                {"channels", c.channels},
                {"num_categories", c.num_categories},
                {"head_hidden", c.head_hidden},
                {"attention_groups", c.attention_groups},
                {"roi_out", c.roi.out},
                {"roi_sampling", c.roi.sampling},
                {"mode", to_string(c.mode)}};
  j["refine"] = {{"num_stages", c.refine.num_stages},
                 {"clamp", c.refine.clamp ? Json(*c.refine.clamp) : Json(nullptr)},
                 {"schedule", c.refine.schedule},
                 {"side_norm", c.refine.side_norm}};
  j["levels"] = {{"k0", c.levels.k0}, {"s0", c.levels.s0}};
  j["delta_norm"] = {{"xy", c.delta_norm.xy}, {"wh", c.delta_norm.wh}};
  j["jitter"] = {{"positives_per_gt", c.jitter.positives_per_gt},
                 {"negatives", c.jitter.negatives},
                 {"center", c.jitter.center},
                 {"log_scale", c.jitter.log_scale},
                 {"positive_iou", c.jitter.positive_iou},
                 {"negative_iou", c.jitter.negative_iou},
                 {"max_tries", c.jitter.max_tries}};
  j["loss"] = {{"cls", c.loss.cls},
               {"box", c.loss.box},
               {"refine", c.loss.refine},
               {"beta", c.loss.beta}};
  j["optim"] = {{"lr", c.optim.lr},
                {"momentum", c.optim.momentum},
                {"weight_decay", c.optim.weight_decay},
                {"batch_size", c.optim.batch_size},
                {"epochs", c.optim.epochs},
                {"warmup_iters", c.optim.warmup_iters},
                {"warmup_ratio", c.optim.warmup_ratio},
                {"lr_steps", c.optim.lr_steps},
                {"gamma", c.optim.gamma}};
  j["infer"] = {{"score_thresh", c.infer.score_thresh},
                {"nms_iou", c.infer.nms_iou},
                {"max_detections", c.infer.max_detections},
                {"grid",
                 {{"stride", c.infer.grid.stride},
                  {"scales", c.infer.grid.scales},
                  {"ratios", c.infer.grid.ratios}}}};
  return j;
}

Json to_json(const RunConfig& c) {
  Json j = to_json(c.detector);
  j["train_data"] = c.train_data.string();
  j["val_data"] = c.val_data.string();
  return j;
}

}  // namespace pbr

#include "efl/data/synthetic.hpp"

#include "efl/error.hpp"
#include "efl/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace efl::data {

namespace fs = std::filesystem;

namespace {

using Rgb = std::array<double, 3>;

struct NamedColor {
  const char* name;
  Rgb rgb;
};

constexpr NamedColor kPalette[] = {
    {"red", {0.85, 0.15, 0.12}},   {"green", {0.15, 0.7, 0.25}},  {"blue", {0.15, 0.3, 0.85}},
    {"yellow", {0.95, 0.85, 0.15}}, {"orange", {0.95, 0.55, 0.1}}, {"purple", {0.55, 0.2, 0.7}},
    {"white", {0.95, 0.95, 0.92}},  {"black", {0.1, 0.1, 0.12}},   {"teal", {0.1, 0.6, 0.6}},
};

struct Noun {
  const char* name;
  bool ellipse;
  double aspect;  // half_w / half_h
};

constexpr Noun kNouns[] = {
    {"cup", false, 0.75}, {"bowl", true, 1.6},  {"plate", true, 2.2},  {"box", false, 1.4},
    {"block", false, 1.0}, {"ball", true, 1.0}, {"sponge", false, 1.8}, {"jar", false, 0.6},
};

constexpr const char* kVerbs[] = {"move", "lift", "push", "pull", "flip"};

constexpr Rgb kSkin{0.87, 0.68, 0.55};

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

double round_ms(double t) { return std::round(t * 1000.0) / 1000.0; }

Rgb muted(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

std::string location_phrase(double cx) {
  if (cx < 0.4) return "on the left side of the table";
  if (cx > 0.6) return "on the right side of the table";
  return "near the middle of the table";
}

std::string verb_phrase(const SceneScript& s) {
  if (s.verb == "move") return s.target_shift[0] < 0 ? "slides it to the left" : "slides it to the right";
  if (s.verb == "lift") return "lifts it up off the table";
  if (s.verb == "push") return "pushes it away across the table";
  if (s.verb == "pull") return "pulls it toward the body";
  return "flips it over to show the other side";
}

std::string describe(const SceneScript& s) {
  const auto& t = s.objects[0];
  std::string text = std::string("The ") + (s.right_hand ? "right" : "left") + " hand reaches for the " + t.color_name +
                     " " + t.noun + " " + location_phrase(t.cx) + " and " + verb_phrase(s) + ".";
  if (s.objects.size() > 1) {
    const auto& o = s.objects[1];
    const bool vowel = std::string("aeiou").find(o.color_name[0]) != std::string::npos;
    text += std::string(vowel ? " An " : " A ") + o.color_name + " " + o.noun + " stays " + (o.cx < t.cx ? "to the left." : "to the right.");
  }
  return text;
}

// Signed distance in normalised units; negative inside.
double shape_distance(const ShapeSpec& s, double cx, double cy, double scale, double x, double y) {
  const double hw = s.half_w * scale, hh = s.half_h * scale;
  const double dx = x - cx, dy = y - cy;
  if (s.ellipse) {
    const double r = std::sqrt((dx / hw) * (dx / hw) + (dy / hh) * (dy / hh));
    return (r - 1.0) * std::min(hw, hh);
  }
  return std::max(std::abs(dx) - hw, std::abs(dy) - hh);
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  const double h = len2 > 0 ? std::clamp(((px - ax) * vx + (py - ay) * vy) / len2, 0.0, 1.0) : 0.0;
  const double qx = ax + h * vx - px, qy = ay + h * vy - py;
  return std::sqrt(qx * qx + qy * qy);
}

struct FrameState {
  double cx, cy, scale;
  Rgb color;
  double hand_x, hand_y;
  double cam_x, cam_y;
};

FrameState state_at(const SceneScript& s, double t, int resolution) {
  const auto& inst = s.instance;
  const auto& obj = s.objects[0];
  FrameState st{};
  const double p = smoothstep((t - inst.t_start) / (inst.t_end - inst.t_start));
  st.cx = obj.cx + p * s.target_shift[0];
  st.cy = obj.cy + p * s.target_shift[1];
  st.scale = 1.0 + p * (s.target_scale - 1.0);
  st.color = lerp(obj.color, s.target_color, p);

  const double side = s.right_hand ? 1.0 : -1.0;
  const double entry_x = 0.5 + side * 0.38, entry_y = 1.15;
  auto grip = [&](double cx, double cy, double sc) {
    return std::array<double, 2>{cx + side * obj.half_w * sc * 0.7, cy + obj.half_h * sc * 0.35};
  };
  const auto g0 = grip(obj.cx, obj.cy, 1.0);
  const auto g = grip(st.cx, st.cy, st.scale);
  if (t < inst.t_start) {
    const double q = smoothstep((t - s.clip_start) / (inst.t_start - s.clip_start));
    st.hand_x = entry_x + (g0[0] - entry_x) * q;
    st.hand_y = entry_y + (g0[1] - entry_y) * q;
  } else if (t <= inst.t_end) {
    st.hand_x = g[0];
    st.hand_y = g[1];
  } else {
    const double q = 0.5 * smoothstep((t - inst.t_end) / 0.8);
    st.hand_x = g[0] + (entry_x - g[0]) * q;
    st.hand_y = g[1] + (entry_y - g[1]) * q;
  }

  const double u = (t - s.clip_start) / std::max(1e-9, s.clip_end - s.clip_start);
  if (s.camera == CameraRegime::pan) {
    st.cam_x = s.pan[0] * (u - 0.5);
    st.cam_y = s.pan[1] * (u - 0.5);
  }
  if (s.jitter_px > 0.0) {
    const double a = s.jitter_px / resolution;
    st.cam_x += a * std::sin(7.3 * t + s.jitter_phase);
    st.cam_y += a * std::sin(5.1 * t + 2.0 * s.jitter_phase);
  }
  return st;
}

}  // namespace

SyntheticCorpusSpec SyntheticCorpusSpec::from(const KeyValueConfig& kv) {
  SyntheticCorpusSpec s;
  s.n_instances = static_cast<int>(kv.get_int("n_instances", s.n_instances));
  s.seed = kv.get_u64("seed", s.seed);
  s.resolution = static_cast<int>(kv.get_int("render_resolution", kv.get_int("resolution", s.resolution)));
  s.fps = kv.get_double("fps", s.fps);
  s.ego4d_fraction = kv.get_double("ego4d_fraction", s.ego4d_fraction);
  s.pan_fraction = kv.get_double("pan_fraction", s.pan_fraction);
  s.steady_fraction = kv.get_double("steady_fraction", s.steady_fraction);
  s.blur_fraction = kv.get_double("blur_fraction", s.blur_fraction);
  s.jitter_px = kv.get_double("jitter_px", s.jitter_px);
  EFL_CHECK(s.n_instances > 0, Errc::config, "n_instances must be positive");
  EFL_CHECK(s.resolution >= 8, Errc::config, "render resolution must be >= 8");
  EFL_CHECK(s.fps > 0.0, Errc::config, "fps must be positive");
  EFL_CHECK(s.pan_fraction >= 0.0 && s.steady_fraction >= 0.0 && s.pan_fraction + s.steady_fraction <= 1.0,
            Errc::config, "camera regime fractions must be non-negative and sum to at most 1");
  return s;
}

int SceneScript::frame_count() const { return static_cast<int>(std::floor((clip_end - clip_start) * fps)) + 1; }

double SceneScript::frame_time(int index) const { return round_ms(clip_start + index / fps); }

SceneScript make_scene(const SyntheticCorpusSpec& spec, int index) {
  Rng rng = Rng(spec.seed).derive(static_cast<std::uint64_t>(index));
  SceneScript s;
  s.fps = spec.fps;

  s.bg_low = muted(rng, 0.25, 0.55);
  s.bg_high = muted(rng, 0.5, 0.8);
  s.table = muted(rng, 0.35, 0.7);
  s.stripe_angle = rng.uniform(0.0, std::numbers::pi);
  s.stripe_freq = rng.uniform(2.0, 6.0);
  s.table_y = rng.uniform(0.4, 0.55);

  const int n_objects = 2 + static_cast<int>(rng.index(2));
  std::vector<std::size_t> colors;
  for (int k = 0; k < n_objects; ++k) {
    ShapeSpec o;
    const auto& noun = kNouns[rng.index(std::size(kNouns))];
    std::size_t ci = rng.index(std::size(kPalette));
    while (std::find(colors.begin(), colors.end(), ci) != colors.end()) ci = rng.index(std::size(kPalette));
    colors.push_back(ci);
    o.noun = noun.name;
    o.ellipse = noun.ellipse;
    o.half_h = rng.uniform(0.06, 0.11);
    o.half_w = std::min(0.2, o.half_h * noun.aspect);
    o.color_name = kPalette[ci].name;
    o.color = kPalette[ci].rgb;
    if (k == 0) {
      o.cx = rng.uniform(0.32, 0.68);
      o.cy = rng.uniform(s.table_y + 0.15, 0.78);
    } else {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      o.cx = std::clamp(s.objects[0].cx + side * rng.uniform(0.25, 0.4), 0.12, 0.88);
      o.cy = rng.uniform(s.table_y + 0.08, 0.85);
    }
    s.objects.push_back(o);
  }

  s.verb = kVerbs[rng.index(std::size(kVerbs))];
  const double mag = rng.uniform(0.08, 0.22);
  const auto& t0 = s.objects[0];
  s.target_color = t0.color;
  if (s.verb == "move") {
    s.target_shift = {rng.uniform() < 0.5 ? -mag : mag, 0.0};
  } else if (s.verb == "lift") {
    s.target_shift = {0.0, -mag};
    s.target_scale = 1.1;
  } else if (s.verb == "push") {
    s.target_shift = {0.0, -0.6 * mag};
    s.target_scale = 0.8;
  } else if (s.verb == "pull") {
    s.target_shift = {0.0, 0.4 * mag};
    s.target_scale = 1.2;
  } else {
    s.target_color = {0.5 * t0.color[0] + 0.15, 0.5 * t0.color[1] + 0.15, 0.5 * t0.color[2] + 0.15};
  }
  s.right_hand = rng.uniform() < 0.5;

  const double regime = rng.uniform();
  if (regime < spec.pan_fraction) {
    s.camera = CameraRegime::pan;
    const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amount = rng.uniform(0.2, 0.45);
    s.pan = {amount * std::cos(dir), 0.5 * amount * std::sin(dir)};
    s.jitter_px = spec.jitter_px;
  } else if (regime < spec.pan_fraction + spec.steady_fraction) {
    s.camera = CameraRegime::steady;
  } else {
    s.camera = CameraRegime::jitter;
    s.jitter_px = spec.jitter_px;
  }
  s.jitter_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  ActionInstance& a = s.instance;
  char vid[32];
  std::snprintf(vid, sizeof(vid), "syn%05d", index);
  a.video_id = vid;
  a.action_label = s.verb + " " + t0.noun;
  a.t_start = round_ms(rng.uniform(2.0, 20.0));
  a.t_end = round_ms(a.t_start + rng.uniform(1.0, 2.5));
  if (rng.uniform() < spec.ego4d_fraction) {
    a.dataset_tag = DatasetTag::ego4d_style;
    a.t_pre = round_ms(a.t_start - rng.uniform(0.3, 0.9));
    a.t_pnr = round_ms(a.t_start + rng.uniform(0.35, 0.8) * (a.t_end - a.t_start));
    if (rng.uniform() < 0.04) a.t_pnr.reset();
  } else {
    a.dataset_tag = DatasetTag::ek_style;
  }
  s.clip_start = round_ms(a.t_start - 1.2);
  s.clip_end = round_ms(a.t_end + 0.6);

  auto clip_box = [](double cx, double cy, double hw, double hh) {
    std::array<double, 4> b{std::clamp(cx - hw, 0.0, 0.98), std::clamp(cy - hh, 0.0, 0.98), std::clamp(cx + hw, 0.02, 1.0),
                            std::clamp(cy + hh, 0.02, 1.0)};
    b[2] = std::max(b[2], b[0] + 0.01);
    b[3] = std::max(b[3], b[1] + 0.01);
    return b;
  };
  const FrameState st = state_at(s, a.t_start, spec.resolution);
  a.boxes.push_back({s.right_hand ? "right hand" : "left hand",
                     clip_box(st.hand_x - st.cam_x, st.hand_y - st.cam_y, 0.07, 0.055)});
  for (const auto& o : s.objects) {
    const bool target = &o == &s.objects[0];
    const double cx = (target ? st.cx : o.cx) - st.cam_x, cy = (target ? st.cy : o.cy) - st.cam_y;
    a.boxes.push_back({o.noun, clip_box(cx, cy, o.half_w, o.half_h)});
  }

  for (int i = 0; i < s.frame_count(); ++i)
    if (rng.uniform() < spec.blur_fraction) s.blurred.push_back(i);
  s.description = describe(s);
  a.validate();
  return s;
}

std::vector<SceneScript> make_corpus(const SyntheticCorpusSpec& spec) {
  std::vector<SceneScript> out;
  out.reserve(static_cast<std::size_t>(spec.n_instances));
  for (int i = 0; i < spec.n_instances; ++i) out.push_back(make_scene(spec, i));
  return out;
}

Image render_frame(const SceneScript& s, double t, int res) {
  const FrameState st = state_at(s, t, res);
  Image img = blank_image(res, res);
  const std::size_t plane = static_cast<std::size_t>(res) * res;
  const double px = 1.0 / res;
  const double ca = std::cos(s.stripe_angle), sa = std::sin(s.stripe_angle);
  const auto& target = s.objects[0];
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const double u = (x + 0.5) * px + st.cam_x, v = (y + 0.5) * px + st.cam_y;
      const double stripe = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * s.stripe_freq * (u * ca + v * sa));
      const Rgb wall = lerp(s.bg_low, s.bg_high, stripe);
      const double grain = 0.9 + 0.1 * std::sin(2.0 * std::numbers::pi * (9.0 * v + 2.0 * u));
      const Rgb table{s.table[0] * grain, s.table[1] * grain, s.table[2] * grain};
      Rgb c = lerp(wall, table, smoothstep((v - s.table_y) / px + 0.5));

      auto paint = [&](double dist, const Rgb& col) {
        const double cover = std::clamp(0.5 - dist / px, 0.0, 1.0);
        if (cover > 0.0) c = lerp(c, col, cover);
      };
      for (std::size_t k = 1; k < s.objects.size(); ++k) {
        const auto& o = s.objects[k];
        const double shade = 1.0 - 0.3 * std::clamp((v - o.cy + o.half_h) / (2 * o.half_h), 0.0, 1.0);
        paint(shape_distance(o, o.cx, o.cy, 1.0, u, v), {o.color[0] * shade, o.color[1] * shade, o.color[2] * shade});
      }
      {
        const double hh = target.half_h * st.scale;
        const double shade = 1.0 - 0.3 * std::clamp((v - st.cy + hh) / (2 * hh), 0.0, 1.0);
        paint(shape_distance(target, st.cx, st.cy, st.scale, u, v),
              {st.color[0] * shade, st.color[1] * shade, st.color[2] * shade});
      }
      const double side = s.right_hand ? 1.0 : -1.0;
      const double arm = segment_distance(u, v, st.hand_x, st.hand_y, 0.5 + side * 0.45, 1.3) - 0.035;
      paint(arm, {kSkin[0] * 0.9, kSkin[1] * 0.9, kSkin[2] * 0.9});
      const double hx = (u - st.hand_x) / 0.07, hy = (v - st.hand_y) / 0.055;
      paint((std::sqrt(hx * hx + hy * hy) - 1.0) * 0.055, kSkin);

      const auto p = static_cast<std::size_t>(y) * res + x;
      img[p] = c[0];
      img[plane + p] = c[1];
      img[2 * plane + p] = c[2];
    }
  return clamp01(img);
}

std::vector<FrameRecord> render_clip(const SceneScript& s, int resolution) {
  std::vector<FrameRecord> out;
  for (int i = 0; i < s.frame_count(); ++i) {
    const double t = s.frame_time(i);
    Image img = render_frame(s, t, resolution);
    if (std::binary_search(s.blurred.begin(), s.blurred.end(), i)) img = motion_blur(img, std::max(1, resolution / 24));
    out.push_back({t, quantize8(img), 0.0});
  }
  return out;
}

SyntheticFrameSource::SyntheticFrameSource(std::vector<SceneScript> scenes, int resolution) : resolution_(resolution) {
  for (auto& s : scenes) {
    const std::string key = s.instance.key();
    scenes_.emplace(key, std::move(s));
  }
}

std::vector<FrameRecord> SyntheticFrameSource::frames(const ActionInstance& inst) const {
  const auto it = scenes_.find(inst.key());
  if (it == scenes_.end()) return {};
  return render_clip(it->second, resolution_);
}

void write_raw_store(const fs::path& dir, const std::vector<SceneScript>& scenes, int resolution) {
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  EFL_CHECK(!ec, Errc::io, "cannot create " + (dir / "frames").string() + ": " + ec.message());
  std::string instances, frames, descriptions;
  for (const auto& s : scenes) {
    const auto& inst = s.instance;
    instances += to_json(inst).dump() + "\n";
    const std::string stem = frame_file_stem(inst);
    fs::create_directories(dir / "frames" / stem, ec);
    EFL_CHECK(!ec, Errc::io, "cannot create frame directory for " + stem);
    nlohmann::ordered_json idx;
    idx["key"] = inst.key();
    idx["frames"] = nlohmann::ordered_json::array();
    const auto clip = render_clip(s, resolution);
    for (std::size_t i = 0; i < clip.size(); ++i) {
      char name[16];
      std::snprintf(name, sizeof(name), "%03zu.ppm", i);
      const std::string rel = "frames/" + stem + "/" + name;
      save_image(dir / rel, clip[i].image);
      idx["frames"].push_back({{"time", clip[i].time}, {"path", rel}});
    }
    frames += idx.dump() + "\n";
    nlohmann::ordered_json d;
    d["key"] = inst.key();
    d["label"] = inst.action_label;
    d["text"] = s.description;
    descriptions += d.dump() + "\n";
  }
  io::write_file_atomic(dir / "instances.jsonl", instances);
  io::write_file_atomic(dir / "frames.jsonl", frames);
  io::write_file_atomic(dir / "descriptions.jsonl", descriptions);
}

std::vector<ActionInstance> read_instances(const fs::path& dir) {
  std::vector<ActionInstance> out;
  for (const auto& line : io::read_lines(dir / "instances.jsonl"))
    if (!line.empty()) out.push_back(instance_from_json(nlohmann::json::parse(line)));
  return out;
}

DirectoryFrameSource::DirectoryFrameSource(fs::path dir) : dir_(std::move(dir)) {
  for (const auto& line : io::read_lines(dir_ / "frames.jsonl")) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    auto& frames = index_[j.at("key").get<std::string>()];
    for (const auto& f : j.at("frames")) frames.emplace_back(f.at("time").get<double>(), f.at("path").get<std::string>());
  }
}

std::vector<FrameRecord> DirectoryFrameSource::frames(const ActionInstance& inst) const {
  const auto it = index_.find(inst.key());
  if (it == index_.end()) return {};
  std::vector<FrameRecord> out;
  for (const auto& [t, rel] : it->second) {
    const fs::path p = dir_ / rel;
    if (!fs::exists(p)) return {};
    out.push_back({t, load_image(p), 0.0});
  }
  return out;
}

}  // namespace efl::data

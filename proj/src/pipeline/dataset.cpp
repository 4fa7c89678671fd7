#include "bfr/errors.hpp"
#include "bfr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace bfr {

namespace fs = std::filesystem;

namespace {

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm";
}

std::map<std::string, fs::path> list_images(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image(entry.path())) continue;
    const auto stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second) {
      throw ValidationError("duplicate image stem '" + stem + "' in " + dir.string());
    }
  }
  return out;
}

double smoothstep(double edge, double d) {
  // 1 inside (d < -edge), 0 outside (d > edge).
  const double t = std::clamp((edge - d) / (2 * edge), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

struct Painter {
  Index size;
  std::vector<double> rgb;  // planar [3, size, size]

  void ellipse(double cx, double cy, double rx, double ry, const std::array<double, 3>& color, double alpha = 1) {
    const double aa = 1.0 / static_cast<double>(size);
    for (Index i = 0; i < size; ++i) {
      for (Index j = 0; j < size; ++j) {
        const double y = (i + 0.5) / size, x = (j + 0.5) / size;
        const double r = std::hypot((x - cx) / rx, (y - cy) / ry);
        const double d = (r - 1) * std::min(rx, ry);
        const double a = alpha * smoothstep(aa, d);
        if (a <= 0) continue;
        for (int c = 0; c < 3; ++c) {
          double& px = rgb[static_cast<std::size_t>((c * size + i) * size + j)];
          px = (1 - a) * px + a * color[static_cast<std::size_t>(c)];
        }
      }
    }
  }
};

}  // namespace

bool Dataset::has_lq() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const ImageRecord& r) { return r.lq.has_value(); });
}

RoiBoxes parse_roi_boxes(const std::string& text) {
  RoiBoxes boxes;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string name;
    if (!(fields >> name)) continue;
    Box b;
    if (!(fields >> b.x0 >> b.y0 >> b.x1 >> b.y1)) {
      throw ConfigError("roi_boxes line " + std::to_string(number) + ": expected 'region x0 y0 x1 y1'");
    }
    std::string extra;
    if (fields >> extra) throw ConfigError("roi_boxes line " + std::to_string(number) + ": trailing '" + extra + "'");
    boxes[parse_region(name)] = b;
  }
  boxes.validate();
  return boxes;
}

std::string format_roi_boxes(const RoiBoxes& boxes) {
  std::ostringstream out;
  out.precision(17);
  for (Region r : kRegions) {
    const Box& b = boxes[r];
    out << region_name(r) << ' ' << b.x0 << ' ' << b.y0 << ' ' << b.x1 << ' ' << b.y1 << '\n';
  }
  return out.str();
}

Dataset load_dataset(const fs::path& root) {
  const fs::path hq_dir = root / "hq", lq_dir = root / "lq";
  if (!fs::is_directory(hq_dir)) throw ValidationError("dataset has no hq/ directory: " + root.string());
  Dataset data;
  const auto hq = list_images(hq_dir);
  if (hq.empty()) throw ValidationError("no .png or .ppm images in " + hq_dir.string());
  std::map<std::string, fs::path> lq;
  if (fs::is_directory(lq_dir)) lq = list_images(lq_dir);
  for (const auto& [stem, path] : lq) {
    if (!hq.count(stem)) throw ValidationError("lq image '" + stem + "' has no hq counterpart");
  }
  for (const auto& [stem, path] : hq) {
    ImageRecord rec = load_image(path);
    if (auto it = lq.find(stem); it != lq.end()) {
      auto low = load_image(it->second).hq;
      if (low.shape() != rec.hq.shape()) {
        throw ValidationError("lq image '" + stem + "' is " + to_string(low.shape()) + ", hq is " + to_string(rec.hq.shape()));
      }
      rec.lq = std::move(low);
    }
    if (!data.records.empty() && rec.hq.shape() != data.records.front().hq.shape()) {
      throw ValidationError("image '" + stem + "' size differs from '" + data.records.front().id + "'");
    }
    data.records.push_back(std::move(rec));
  }
  if (!lq.empty() && !data.has_lq()) throw ValidationError("lq/ does not cover every hq image");
  if (const auto cfg = root / "roi_boxes.cfg"; fs::exists(cfg)) {
    std::ifstream in(cfg);
    std::stringstream text;
    text << in.rdbuf();
    data.boxes = parse_roi_boxes(text.str());
  }
  return data;
}

void save_dataset(const Dataset& data, const fs::path& root) {
  fs::create_directories(root / "hq");
  for (const auto& rec : data.records) {
    save_image(rec.hq, root / "hq" / (rec.id + ".png"));
    if (rec.lq) save_image(*rec.lq, root / "lq" / (rec.id + ".png"));
  }
  if (data.boxes) {
    std::ofstream out(root / "roi_boxes.cfg");
    out << format_roi_boxes(*data.boxes);
    if (!out) throw Error("cannot write " + (root / "roi_boxes.cfg").string());
  }
}

Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

void synthesize_lq(Dataset& data, const DegradationParams& params, std::uint64_t seed) {
  params.validate();
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    Rng rng = stream_rng(seed, i);
    // Pixel-exact with a dataset reloaded from disk.
    auto low = degrade(data.records[i].hq, params, rng);
    low = Tensor<float>(low.shape(), low.values().unaryExpr([](float v) { return from_u8(to_u8(v)); }));
    data.records[i].lq = std::move(low);
  }
}

Dataset synthetic_faces(Index count, Index size, std::uint64_t seed) {
  if (count < 1 || size < 8 || (size & (size - 1)) != 0) {
    throw ConfigError("synthetic_faces needs count >= 1 and a power-of-two size >= 8");
  }
  const RoiBoxes boxes;
  Dataset data;
  for (Index n = 0; n < count; ++n) {
    Rng rng = stream_rng(seed, static_cast<std::uint64_t>(n));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto jitter = [&](double amount) { return (2 * u(rng) - 1) * amount; };
    Painter p{size, std::vector<double>(static_cast<std::size_t>(3 * size * size))};

    const std::array<double, 3> bg{0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)};
    for (Index i = 0; i < size; ++i) {
      const double shade = 0.85 + 0.3 * (i + 0.5) / size;
      for (int c = 0; c < 3; ++c)
        for (Index j = 0; j < size; ++j)
          p.rgb[static_cast<std::size_t>((c * size + i) * size + j)] = std::min(1.0, bg[static_cast<std::size_t>(c)] * shade);
    }
    const double tone = 0.55 + 0.35 * u(rng);
    const std::array<double, 3> skin{tone, tone * (0.72 + 0.08 * u(rng)), tone * (0.55 + 0.1 * u(rng))};
    const std::array<double, 3> hair{0.1 + 0.3 * u(rng), 0.07 + 0.2 * u(rng), 0.05 + 0.1 * u(rng)};
    p.ellipse(0.5, 0.36 + jitter(0.02), 0.40, 0.30, hair);
    p.ellipse(0.5 + jitter(0.01), 0.54, 0.34 + jitter(0.02), 0.42 + jitter(0.02), skin);

    const std::array<double, 3> iris{0.1 + 0.3 * u(rng), 0.1 + 0.3 * u(rng), 0.1 + 0.3 * u(rng)};
    const double eye_y = 0.5 * (boxes.left_eye.y0 + boxes.left_eye.y1) + jitter(0.01);
    for (const Box& b : {boxes.left_eye, boxes.right_eye}) {
      const double cx = 0.5 * (b.x0 + b.x1);
      p.ellipse(cx, eye_y - 0.06, 0.09, 0.018, hair);
      p.ellipse(cx, eye_y + 0.01, 0.085, 0.04 + jitter(0.008), {0.95, 0.95, 0.93});
      p.ellipse(cx + jitter(0.015), eye_y + 0.01, 0.035, 0.035, iris);
      p.ellipse(cx, eye_y + 0.01, 0.014, 0.014, {0.02, 0.02, 0.02});
    }
    p.ellipse(0.5, 0.55, 0.035, 0.08, {skin[0] * 0.8, skin[1] * 0.8, skin[2] * 0.8}, 0.6);

    const Box& m = boxes.mouth;
    const std::array<double, 3> lips{0.55 + 0.3 * u(rng), 0.15 + 0.15 * u(rng), 0.15 + 0.15 * u(rng)};
    const double mouth_y = 0.5 * (m.y0 + m.y1);
    p.ellipse(0.5, mouth_y, 0.12 + jitter(0.03), 0.035 + jitter(0.01), lips);
    p.ellipse(0.5, mouth_y, 0.09, 0.006, {0.2, 0.05, 0.05});

    Tensor<float>::Array v(3 * size * size);
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(std::clamp(p.rgb[static_cast<std::size_t>(i)], 0.0, 1.0) * 2 - 1);
    // Quantize so the in-memory set equals its saved copy.
    v = v.unaryExpr([](float x) { return from_u8(to_u8(x)); });
    char id[32];
    std::snprintf(id, sizeof id, "face_%04ld", static_cast<long>(n));
    data.records.push_back({id, Tensor<float>({3, size, size}, std::move(v)), std::nullopt, std::nullopt});
  }
  return data;
}

Tensor<float> stack_images(const Dataset& data, const std::vector<Index>& indices, bool lq) {
  if (indices.empty()) throw ContractError("stack_images: no indices");
  const Index s = data.image_size();
  const Index per = 3 * s * s;
  Tensor<float>::Array v(static_cast<Index>(indices.size()) * per);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= data.size()) throw ContractError("stack_images: index " + std::to_string(i) + " out of range");
    const auto& rec = data.records[static_cast<std::size_t>(i)];
    if (lq && !rec.lq) throw ContractError("stack_images: record '" + rec.id + "' has no lq image");
    v.segment(static_cast<Index>(k) * per, per) = (lq ? *rec.lq : rec.hq).values();
  }
  return Tensor<float>({static_cast<Index>(indices.size()), 3, s, s}, std::move(v));
}

}  // namespace bfr

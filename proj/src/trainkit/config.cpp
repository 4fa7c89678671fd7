#include "bfr/errors.hpp"
#include "bfr/trainkit.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace bfr {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt(const Range& r) { return fmt(r.lo) + ", " + fmt(r.hi); }
std::string fmt(bool b) { return b ? "true" : "false"; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

double parse_double(const std::string& s) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <typename I>
I parse_int(const std::string& s) {
  I v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("not an integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

Range parse_range(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() == 1) {
    const double v = parse_double(parts[0]);
    return {v, v};
  }
  if (parts.size() != 2) throw ConfigError("expected 'lo, hi': '" + s + "'");
  return {parse_double(parts[0]), parse_double(parts[1])};
}

}  // namespace

LossWeights RunConfig::effective_weights() const {
  LossWeights w = weights;
  if (!use_perceptual) w.perceptual = 0;
  if (!use_roi) w.roi = 0;
  return w;
}

GeneratorConfig RunConfig::effective_generator() const {
  GeneratorConfig g = generator;
  g.use_cab = use_cab;
  return g;
}

void RunConfig::validate() const {
  effective_generator().validate();
  weights.validate();
  degradation.validate();
  aug.validate();
  if (!(adam.lr > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.eps > 0)) {
    throw ConfigError("adam needs lr > 0, 0 <= beta < 1, eps > 0");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (log_every < 0) throw ConfigError("log_every must be >= 0");
  if (roi_size < 4 || roi_size % 4 != 0) throw ConfigError("roi_size must be a positive multiple of 4");
}

RunConfig RunConfig::ablation(int row) {
  if (row < 0 || row >= kAblationRows) throw ConfigError("ablation row must be in [0, 4]");
  RunConfig c;
  c.use_perceptual = row >= 1;
  c.use_roi = row >= 2;
  c.use_aug = row >= 3;
  c.use_cab = row >= 4;
  return c;
}

std::string RunConfig::toggle_label() const {
  std::string out;
  auto add = [&out](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(use_perceptual, "per");
  add(use_roi, "roi");
  add(use_aug, "da");
  add(use_cab, "cab");
  return out.empty() ? "baseline" : out;
}

std::string format_config(const RunConfig& c) {
  std::ostringstream out;
  const auto& g = c.generator;
  out << "# generator\n";
  out << "img_size = " << g.img_size << '\n';
  out << "channels = ";
  for (std::size_t i = 0; i < g.channels.size(); ++i) out << (i ? ", " : "") << g.channels[i];
  out << '\n';
  out << "style_dim = " << g.style_dim << '\n';
  out << "style_depth = " << g.style_depth << '\n';
  out << "heads = " << g.heads << '\n';
  out << "window = " << g.window << '\n';
  out << "squeeze = " << g.squeeze << '\n';
  out << "mlp_ratio = " << g.mlp_ratio << '\n';
  out << "cab_alpha = " << fmt(g.cab_alpha) << '\n';
  out << "skip_mode = " << (g.skip_mode == SkipMode::Concat ? "concat" : "add") << '\n';
  out << "upsample = " << (g.upsample == UpsampleMode::Bilinear ? "bilinear" : "nearest") << '\n';
  out << "# losses\n";
  out << "lambda_l1 = " << fmt(c.weights.l1) << '\n';
  out << "lambda_perceptual = " << fmt(c.weights.perceptual) << '\n';
  out << "lambda_adversarial = " << fmt(c.weights.adversarial) << '\n';
  out << "lambda_identity = " << fmt(c.weights.identity) << '\n';
  out << "lambda_roi = " << fmt(c.weights.roi) << '\n';
  out << "lambda_bcr = " << fmt(c.weights.bcr) << '\n';
  out << "roi_size = " << c.roi_size << '\n';
  out << "share_eyes = " << fmt(c.share_eyes) << '\n';
  out << "# degradation\n";
  out << "blur_sigma = " << fmt(c.degradation.blur_sigma) << '\n';
  out << "downscale = " << fmt(c.degradation.downscale) << '\n';
  out << "noise_sigma = " << fmt(c.degradation.noise_sigma) << '\n';
  out << "quality = " << fmt(c.degradation.quality) << '\n';
  out << "# augmentation\n";
  out << "aug_flip = " << fmt(c.aug.flip) << '\n';
  out << "aug_color = " << fmt(c.aug.color) << '\n';
  out << "aug_translation = " << fmt(c.aug.translation) << '\n';
  out << "aug_cutout = " << fmt(c.aug.cutout) << '\n';
  out << "aug_translation_ratio = " << fmt(c.aug.translation_ratio) << '\n';
  out << "aug_cutout_ratio = " << fmt(c.aug.cutout_ratio) << '\n';
  out << "aug_color_strength = " << fmt(c.aug.color_strength) << '\n';
  out << "# optimizer\n";
  out << "lr = " << fmt(c.adam.lr) << '\n';
  out << "beta1 = " << fmt(c.adam.beta1) << '\n';
  out << "beta2 = " << fmt(c.adam.beta2) << '\n';
  out << "eps = " << fmt(c.adam.eps) << '\n';
  out << "batch_size = " << c.batch_size << '\n';
  out << "steps = " << c.steps << '\n';
  out << "seed = " << c.seed << '\n';
  out << "log_every = " << c.log_every << '\n';
  out << "# ablation toggles\n";
  out << "use_perceptual = " << fmt(c.use_perceptual) << '\n';
  out << "use_roi = " << fmt(c.use_roi) << '\n';
  out << "use_aug = " << fmt(c.use_aug) << '\n';
  out << "use_cab = " << fmt(c.use_cab) << '\n';
  return out.str();
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  auto& g = c.generator;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"img_size", [&](const std::string& v) { g.img_size = parse_int<Index>(v); }},
      {"channels",
       [&](const std::string& v) {
         g.channels.clear();
         for (const auto& item : split_list(v)) g.channels.push_back(parse_int<Index>(item));
       }},
      {"style_dim", [&](const std::string& v) { g.style_dim = parse_int<Index>(v); }},
      {"style_depth", [&](const std::string& v) { g.style_depth = parse_int<Index>(v); }},
      {"heads", [&](const std::string& v) { g.heads = parse_int<Index>(v); }},
      {"window", [&](const std::string& v) { g.window = parse_int<Index>(v); }},
      {"squeeze", [&](const std::string& v) { g.squeeze = parse_int<Index>(v); }},
      {"mlp_ratio", [&](const std::string& v) { g.mlp_ratio = parse_int<Index>(v); }},
      {"cab_alpha", [&](const std::string& v) { g.cab_alpha = parse_double(v); }},
      {"skip_mode",
       [&](const std::string& v) {
         if (v != "concat" && v != "add") throw ConfigError("skip_mode must be concat or add");
         g.skip_mode = v == "concat" ? SkipMode::Concat : SkipMode::Add;
       }},
      {"upsample",
       [&](const std::string& v) {
         if (v != "bilinear" && v != "nearest") throw ConfigError("upsample must be bilinear or nearest");
         g.upsample = v == "bilinear" ? UpsampleMode::Bilinear : UpsampleMode::Nearest;
       }},
      {"lambda_l1", [&](const std::string& v) { c.weights.l1 = parse_double(v); }},
      {"lambda_perceptual", [&](const std::string& v) { c.weights.perceptual = parse_double(v); }},
      {"lambda_adversarial", [&](const std::string& v) { c.weights.adversarial = parse_double(v); }},
      {"lambda_identity", [&](const std::string& v) { c.weights.identity = parse_double(v); }},
      {"lambda_roi", [&](const std::string& v) { c.weights.roi = parse_double(v); }},
      {"lambda_bcr", [&](const std::string& v) { c.weights.bcr = parse_double(v); }},
      {"roi_size", [&](const std::string& v) { c.roi_size = parse_int<Index>(v); }},
      {"share_eyes", [&](const std::string& v) { c.share_eyes = parse_bool(v); }},
      {"blur_sigma", [&](const std::string& v) { c.degradation.blur_sigma = parse_range(v); }},
      {"downscale", [&](const std::string& v) { c.degradation.downscale = parse_range(v); }},
      {"noise_sigma", [&](const std::string& v) { c.degradation.noise_sigma = parse_range(v); }},
      {"quality", [&](const std::string& v) { c.degradation.quality = parse_range(v); }},
      {"aug_flip", [&](const std::string& v) { c.aug.flip = parse_bool(v); }},
      {"aug_color", [&](const std::string& v) { c.aug.color = parse_bool(v); }},
      {"aug_translation", [&](const std::string& v) { c.aug.translation = parse_bool(v); }},
      {"aug_cutout", [&](const std::string& v) { c.aug.cutout = parse_bool(v); }},
      {"aug_translation_ratio", [&](const std::string& v) { c.aug.translation_ratio = parse_double(v); }},
      {"aug_cutout_ratio", [&](const std::string& v) { c.aug.cutout_ratio = parse_double(v); }},
      {"aug_color_strength", [&](const std::string& v) { c.aug.color_strength = parse_double(v); }},
      {"lr", [&](const std::string& v) { c.adam.lr = parse_double(v); }},
      {"beta1", [&](const std::string& v) { c.adam.beta1 = parse_double(v); }},
      {"beta2", [&](const std::string& v) { c.adam.beta2 = parse_double(v); }},
      {"eps", [&](const std::string& v) { c.adam.eps = parse_double(v); }},
      {"batch_size", [&](const std::string& v) { c.batch_size = parse_int<Index>(v); }},
      {"steps", [&](const std::string& v) { c.steps = parse_int<std::int64_t>(v); }},
      {"seed", [&](const std::string& v) { c.seed = parse_int<std::uint64_t>(v); }},
      {"log_every", [&](const std::string& v) { c.log_every = parse_int<std::int64_t>(v); }},
      {"use_perceptual", [&](const std::string& v) { c.use_perceptual = parse_bool(v); }},
      {"use_roi", [&](const std::string& v) { c.use_roi = parse_bool(v); }},
      {"use_aug", [&](const std::string& v) { c.use_aug = parse_bool(v); }},
      {"use_cab", [&](const std::string& v) { c.use_cab = parse_bool(v); }},
  };
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(number) + ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + " (" + key + "): " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

}  // namespace bfr

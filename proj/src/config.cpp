#include "msat/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

namespace msat {
namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> list_of(const std::string& key, const std::string& v, F convert) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(convert(key, item)));
  return out;
}

std::string join_doubles(const std::vector<double>& xs) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", xs[i]);
    out += (i ? "," : "") + std::string(buf);
  }
  return out;
}

template <typename T>
std::string join_ints(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"scales", [](RunConfig& c, const auto& k, const auto& v) { c.model.streams.scales = list_of<double>(k, v, to_double); }},
      {"dilations", [](RunConfig& c, const auto& k, const auto& v) { c.model.streams.dilations = list_of<Index>(k, v, to_int); }},
      {"widths", [](RunConfig& c, const auto& k, const auto& v) {
         auto w = list_of<Index>(k, v, to_int);
         if (w.size() != 3) throw ConfigError("config: 'widths' needs exactly 3 values");
         std::copy(w.begin(), w.end(), c.model.backbone.widths.begin());
       }},
      {"n_class", [](RunConfig& c, const auto& k, const auto& v) {
         c.model.backbone.n_class = to_int(k, v);
         c.synth.n_class = static_cast<int>(to_int(k, v));
       }},
      {"hidden", [](RunConfig& c, const auto& k, const auto& v) { c.model.streams.hidden = to_int(k, v); }},
      {"scale_conv_channels", [](RunConfig& c, const auto& k, const auto& v) { c.model.streams.scale_conv_channels = to_int(k, v); }},
      {"stage3_dilation", [](RunConfig& c, const auto& k, const auto& v) { c.model.backbone.stage3_dilation = to_int(k, v); }},
      {"multi_stage", [](RunConfig& c, const auto& k, const auto& v) { c.model.ablation.multi_stage = to_bool(k, v); }},
      {"diverse_dilations", [](RunConfig& c, const auto& k, const auto& v) { c.model.ablation.diverse_dilations = to_bool(k, v); }},
      {"location_attention", [](RunConfig& c, const auto&, const auto& v) { c.model.ablation.fusion = parse_fusion_mode(v); }},
      {"extra_branch", [](RunConfig& c, const auto& k, const auto& v) { c.model.ablation.extra_branch = to_bool(k, v); }},
      {"recalib_mode", [](RunConfig& c, const auto&, const auto& v) { c.model.ablation.recalib = parse_recalib_mode(v); }},
      {"base_lr", [](RunConfig& c, const auto& k, const auto& v) { c.base_lr = to_double(k, v); }},
      {"power", [](RunConfig& c, const auto& k, const auto& v) { c.power = to_double(k, v); }},
      {"max_iter", [](RunConfig& c, const auto& k, const auto& v) { c.max_iter = static_cast<long>(to_int(k, v)); }},
      {"stop_iter", [](RunConfig& c, const auto& k, const auto& v) { c.stop_iter = static_cast<long>(to_int(k, v)); }},
      {"batch_size", [](RunConfig& c, const auto& k, const auto& v) { c.batch_size = static_cast<long>(to_int(k, v)); }},
      {"decoder_lr_mult", [](RunConfig& c, const auto& k, const auto& v) { c.decoder_lr_mult = to_double(k, v); }},
      {"momentum", [](RunConfig& c, const auto& k, const auto& v) { c.momentum = to_double(k, v); }},
      {"weight_decay", [](RunConfig& c, const auto& k, const auto& v) { c.weight_decay = to_double(k, v); }},
      {"seed", [](RunConfig& c, const auto& k, const auto& v) { c.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"checkpoint_every", [](RunConfig& c, const auto& k, const auto& v) { c.checkpoint_every = static_cast<long>(to_int(k, v)); }},
      {"data", [](RunConfig& c, const auto&, const auto& v) { c.data_dir = v; }},
      {"out", [](RunConfig& c, const auto&, const auto& v) { c.out_dir = v; }},
      {"checkpoint", [](RunConfig& c, const auto&, const auto& v) { c.checkpoint = v; }},
      {"resume", [](RunConfig& c, const auto&, const auto& v) { c.resume = v; }},
      {"ablation_seeds", [](RunConfig& c, const auto& k, const auto& v) { c.ablation_seeds = list_of<std::uint64_t>(k, v, to_int); }},
      {"data_count", [](RunConfig& c, const auto& k, const auto& v) { c.data_count = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"image_size", [](RunConfig& c, const auto& k, const auto& v) { c.synth.height = c.synth.width = to_int(k, v); }},
      {"noise", [](RunConfig& c, const auto& k, const auto& v) { c.synth.noise = to_double(k, v); }},
      {"data_seed", [](RunConfig& c, const auto& k, const auto& v) { c.synth.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(base_lr >= 0)) throw ConfigError("config: base_lr must be >= 0");
  if (!(power > 0)) throw ConfigError("config: power must be > 0");
  if (max_iter < 1) throw ConfigError("config: max_iter must be >= 1");
  if (stop_iter < 0 || stop_iter > max_iter) throw ConfigError("config: stop_iter must be in [0, max_iter]");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(decoder_lr_mult > 0)) throw ConfigError("config: decoder_lr_mult must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("config: momentum must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("config: weight_decay must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("config: checkpoint_every must be >= 0");
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(trim(key));
  if (it == table.end()) throw ConfigError("config: unknown key '" + trim(key) + "'");
  it->second(cfg, it->first, trim(value));
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_setting(base, line.substr(0, eq), line.substr(eq + 1));
  }
  return base;
}

std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  char buf[64];
  auto num = [&buf](double d) {
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return std::string(buf);
  };
  const auto& m = c.model;
  os << "scales = " << join_doubles(m.streams.scales) << '\n'
     << "dilations = " << join_ints(m.streams.dilations) << '\n'
     << "widths = " << m.backbone.widths[0] << ',' << m.backbone.widths[1] << ',' << m.backbone.widths[2] << '\n'
     << "n_class = " << m.backbone.n_class << '\n'
     << "hidden = " << m.streams.hidden << '\n'
     << "scale_conv_channels = " << m.streams.scale_conv_channels << '\n'
     << "stage3_dilation = " << m.backbone.stage3_dilation << '\n'
     << "multi_stage = " << (m.ablation.multi_stage ? "true" : "false") << '\n'
     << "diverse_dilations = " << (m.ablation.diverse_dilations ? "true" : "false") << '\n'
     << "location_attention = " << to_string(m.ablation.fusion) << '\n'
     << "extra_branch = " << (m.ablation.extra_branch ? "true" : "false") << '\n'
     << "recalib_mode = " << to_string(m.ablation.recalib) << '\n'
     << "base_lr = " << num(c.base_lr) << '\n'
     << "power = " << num(c.power) << '\n'
     << "max_iter = " << c.max_iter << '\n'
     << "stop_iter = " << c.stop_iter << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "decoder_lr_mult = " << num(c.decoder_lr_mult) << '\n'
     << "momentum = " << num(c.momentum) << '\n'
     << "weight_decay = " << num(c.weight_decay) << '\n'
     << "seed = " << c.seed << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n'
     << "data = " << c.data_dir.string() << '\n'
     << "out = " << c.out_dir.string() << '\n'
     << "ablation_seeds = " << join_ints(c.ablation_seeds) << '\n'
     << "data_count = " << c.data_count << '\n'
     << "image_size = " << c.synth.height << '\n'
     << "noise = " << num(c.synth.noise) << '\n'
     << "data_seed = " << c.synth.seed << '\n';
  if (!c.checkpoint.empty()) os << "checkpoint = " << c.checkpoint.string() << '\n';
  if (!c.resume.empty()) os << "resume = " << c.resume.string() << '\n';
  return os.str();
}

}  // namespace msat

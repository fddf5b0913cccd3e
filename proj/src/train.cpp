#include "msat/train.hpp"

#include "msat/checkpoint.hpp"
#include "msat/losses.hpp"
#include "msat/pnm.hpp"
#include "msat/rng.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace msat {

double poly_lr(double base_lr, long iter, long max_iter, double power) {
  if (iter > max_iter) {
    std::cerr << "warning: poly_lr iteration " << iter << " exceeds max_iter " << max_iter
              << "; learning rate clamped to 0\n";
    return 0.0;
  }
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

std::string log_csv_header(std::size_t n_scales) {
  std::string h = "iter,lr,loss_total,loss_final";
  for (std::size_t s = 0; s < n_scales; ++s) h += ",loss_s" + std::to_string(s + 1);
  return h;
}

std::string format_log_row(const LogRow& row) {
  char buf[64];
  std::string out = std::to_string(row.iter);
  for (double v : {row.lr, row.loss_total, row.loss_final}) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    out += buf;
  }
  for (double v : row.loss_streams) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    out += buf;
  }
  return out;
}

namespace {
constexpr const char* kMomentumPrefix = "state/momentum/";
constexpr const char* kIterKey = "state/iter";
}  // namespace

ParamMap<float> encode_state(const TrainState& state) {
  ParamMap<float> out = state.params;
  for (const auto& [name, t] : state.momentum) out.emplace(kMomentumPrefix + name, t);
  // float holds integers exactly up to 2^24
  out.emplace(kIterKey, TensorF::constant({1}, static_cast<float>(state.iteration)));
  return out;
}

TrainState decode_state(const ParamMap<float>& tensors) {
  TrainState state;
  const std::string prefix = kMomentumPrefix;
  for (const auto& [name, t] : tensors) {
    if (name == kIterKey) {
      state.iteration = static_cast<long>(t[0]);
    } else if (name.rfind(prefix, 0) == 0) {
      state.momentum.emplace(name.substr(prefix.size()), t);
    } else if (name.rfind("state/", 0) != 0) {
      state.params.emplace(name, t);
    }
  }
  for (const auto& [name, t] : state.params) {
    if (!state.momentum.contains(name)) state.momentum.emplace(name, TensorF::zeros(t.shape()));
  }
  return state;
}

ParamMap<float> model_tensors(const ParamMap<float>& tensors) {
  ParamMap<float> out;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("state/", 0) != 0) out.emplace(name, t);
  }
  return out;
}

std::vector<std::uint64_t> batch_indices(const std::vector<std::uint64_t>& pool, long iter, long batch_size,
                                         std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("batch_indices: empty sample pool");
  const auto n = static_cast<std::uint64_t>(pool.size());
  std::vector<std::uint64_t> out;
  std::uint64_t cached_epoch = UINT64_MAX;
  std::vector<std::uint64_t> perm;
  for (long j = 0; j < batch_size; ++j) {
    const auto k = static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(batch_size) + static_cast<std::uint64_t>(j);
    const std::uint64_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm = pool;
      CounterRng rng(hash_combine(seed, 0x65706f6368ULL + epoch));
      for (std::uint64_t i = n - 1; i > 0; --i) {
        std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[k % n]);
  }
  return out;
}

TensorF stack_images(const std::vector<const TensorF*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  if (s.size() != 3) throw ShapeError("stack_images: images must be CxHxW, got " + to_string(s));
  TensorF batch({static_cast<Index>(images.size()), s[0], s[1], s[2]});
  const Index len = shape_size(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("stack_images: image shapes differ");
    batch.data().segment(static_cast<Index>(i) * len, len) = images[i]->data();
  }
  return batch;
}

namespace {

void check_dataset(const ModelConfig& cfg, const Dataset& data) {
  if (data.meta.n_class != cfg.backbone.n_class) {
    throw std::invalid_argument("class count mismatch: dataset has " + std::to_string(data.meta.n_class) +
                                " classes, model has " + std::to_string(cfg.backbone.n_class));
  }
  if (data.images.empty()) throw std::invalid_argument("dataset is empty");
}

void check_params(const ModelConfig& cfg, const ParamMap<float>& params) {
  for (const auto& spec : parameter_layout(cfg)) {
    auto it = params.find(spec.name);
    if (it == params.end()) {
      throw std::invalid_argument("checkpoint is missing parameter '" + spec.name +
                                  "' required by the configured graph");
    }
    if (it->second.shape() != spec.shape) {
      throw std::invalid_argument("parameter '" + spec.name + "' has shape " + to_string(it->second.shape()) +
                                  ", configured graph expects " + to_string(spec.shape) +
                                  (spec.name.rfind("decoder/score", 0) == 0 ? " (class count mismatch)" : ""));
    }
  }
}

VarMap<float> register_model(Tape<float>& tape, const ModelConfig& cfg, const ParamMap<float>& params) {
  VarMap<float> vars;
  for (const auto& spec : parameter_layout(cfg)) vars.emplace(spec.name, tape.parameter(spec.name, params.at(spec.name)));
  return vars;
}

std::string ckpt_name(long iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06ld.msat", iter);
  return buf;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& data, const std::function<void(const LogRow&)>& on_step) {
  cfg.validate();
  check_dataset(cfg.model, data);

  TrainResult result;
  TrainState& state = result.state;
  if (!cfg.resume.empty()) {
    state = decode_state(load_checkpoint(cfg.resume));
    check_params(cfg.model, state.params);
  } else {
    state.params = init_params<float>(cfg.model, cfg.seed);
    for (const auto& [name, t] : state.params) state.momentum.emplace(name, TensorF::zeros(t.shape()));
  }

  const auto pool = data.split(true);
  if (pool.empty()) throw std::invalid_argument("dataset has no training samples");
  const Index h = data.images.front().dim(1), w = data.images.front().dim(2);
  std::vector<LabelMap> targets(data.labels.size());
  for (auto i : pool) targets[i] = resize_nearest(data.labels[i], h / 4, w / 4);

  const std::size_t n_scales = cfg.model.streams.scales.size();
  std::ofstream log_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir / "config.txt", format_config(cfg));
    const auto log_path = cfg.out_dir / "loss_log.csv";
    const bool append = !cfg.resume.empty() && std::filesystem::exists(log_path);
    log_file.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!append) log_file << log_csv_header(n_scales) << '\n';
  }

  const long stop = cfg.stop_iter > 0 ? cfg.stop_iter : cfg.max_iter;
  for (long it = state.iteration; it < stop; ++it) {
    const auto idx = batch_indices(pool, it, cfg.batch_size, cfg.seed);
    std::vector<const TensorF*> imgs;
    std::vector<const LabelMap*> labs;
    for (auto i : idx) {
      imgs.push_back(&data.images[i]);
      labs.push_back(&targets[i]);
    }
    const TensorF batch = stack_images(imgs);
    const LabelMap labels = stack_labels(labs);

    Tape<float> tape;
    const auto vars = register_model(tape, cfg.model, state.params);
    const auto out = model_forward(tape, vars, batch, cfg.model);
    const auto terms = total_loss(out.scores, out.fused, labels);
    const float loss = terms.total.value()[0];
    if (!std::isfinite(loss)) {
      const auto where = tape.first_non_finite();
      throw NumericalError("non-finite loss at iteration " + std::to_string(it) +
                           "; first non-finite tensor: " + where.value_or("loss"));
    }
    const auto grads = tape.backward(terms.total);

    const double lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.power);
    const float momentum = static_cast<float>(cfg.momentum);
    const float decay = static_cast<float>(cfg.weight_decay);
    for (auto& [name, param] : state.params) {
      const auto g = grads.find(name);
      if (g == grads.end()) continue;
      if (!g->second.all_finite()) {
        throw NumericalError("non-finite gradient for parameter '" + name + "' at iteration " + std::to_string(it));
      }
      const float rate = static_cast<float>(is_decoder_param(name) ? lr * cfg.decoder_lr_mult : lr);
      auto& v = state.momentum.at(name).data();
      v = momentum * v + g->second.data() + decay * param.data();
      param.data() -= rate * v;
    }
    state.iteration = it + 1;

    LogRow row;
    row.iter = it;
    row.lr = lr;
    row.loss_total = loss;
    row.loss_final = terms.final_term.value()[0];
    for (const auto& t : terms.stream_terms) row.loss_streams.push_back(t.value()[0]);
    if (log_file.is_open()) log_file << format_log_row(row) << '\n';
    if (on_step) on_step(row);
    result.log.push_back(std::move(row));

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.out_dir / ckpt_name(state.iteration), encode_state(state));
    }
  }
  if (!cfg.out_dir.empty()) save_checkpoint(cfg.out_dir / "model.msat", encode_state(state));
  return result;
}

LabelMap predict_labels(const ModelConfig& cfg, const ParamMap<float>& params, const TensorF& batch) {
  Tape<float> tape;
  const auto vars = register_model(tape, cfg, params);
  return argmax_channels(model_forward(tape, vars, batch, cfg).fused.value());
}

MetricsReport evaluate(const ModelConfig& cfg, const ParamMap<float>& params, const Dataset& data,
                       bool train_split, long batch_size) {
  check_dataset(cfg, data);
  check_params(cfg, params);
  const auto ids = data.split(train_split);
  if (ids.empty()) throw std::invalid_argument("evaluate: split is empty");
  ConfusionMatrix cm(static_cast<int>(cfg.backbone.n_class));
  for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const TensorF*> imgs;
    std::vector<LabelMap> labs;
    for (std::size_t k = start; k < end; ++k) {
      imgs.push_back(&data.images[ids[k]]);
      const auto& l = data.labels[ids[k]];
      labs.push_back(resize_nearest(l, l.h / 4, l.w / 4));
    }
    std::vector<const LabelMap*> lab_ptrs;
    for (const auto& l : labs) lab_ptrs.push_back(&l);
    cm.accumulate(predict_labels(cfg, params, stack_images(imgs)), stack_labels(lab_ptrs));
  }
  return make_report(cm);
}

namespace {
LabelMap quantize_plane(const TensorF& t, Index channel) {
  const Index h = t.dim(2), w = t.dim(3);
  LabelMap out(1, h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const float v = std::clamp(t(0, channel, y, x), 0.0f, 1.0f);
      out(0, y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}
}  // namespace

Prediction predict(const ModelConfig& cfg, const ParamMap<float>& params, const TensorF& image) {
  check_params(cfg, params);
  if (image.rank() != 3) throw ShapeError("predict: image must be 3xHxW");
  const TensorF batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tape<float> tape;
  const auto vars = register_model(tape, cfg, params);
  const auto out = model_forward(tape, vars, batch, cfg);

  Prediction p;
  p.mask = resize_nearest(argmax_channels(out.fused.value()), image.dim(1), image.dim(2));
  p.colorized = colorize_mask(p.mask, class_palette(static_cast<int>(cfg.backbone.n_class)));
  if (out.attention) {
    const TensorF weights = softmax_channels(out.attention->location_logits.value());
    for (Index s = 0; s < weights.dim(1); ++s) p.attention.push_back(quantize_plane(weights, s));
    if (out.attention->recalibration) {
      const TensorF& wr = out.attention->recalibration->value();
      for (Index c = 0; c < wr.dim(1); ++c) p.recalibration.push_back(quantize_plane(wr, c));
    }
  }
  return p;
}

void write_prediction(const Prediction& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "mask.pgm", write_pgm(p.mask));
  write_file(dir / "colorized.ppm", write_ppm(p.colorized));
  for (std::size_t s = 0; s < p.attention.size(); ++s) {
    write_file(dir / ("attention_s" + std::to_string(s + 1) + ".pgm"), write_pgm(p.attention[s]));
  }
  for (std::size_t c = 0; c < p.recalibration.size(); ++c) {
    write_file(dir / ("recalib_c" + std::to_string(c) + ".pgm"), write_pgm(p.recalibration[c]));
  }
}

std::vector<AblationRow> ablation_rows(const Ablation& base) {
  auto with = [&base](bool multi, bool diverse, FusionMode fusion, bool extra) {
    Ablation a = base;
    a.multi_stage = multi;
    a.diverse_dilations = diverse;
    a.fusion = fusion;
    a.extra_branch = extra;
    return a;
  };
  return {
      {"attention-to-scale", with(false, false, FusionMode::attention, false), {}, 0.0},
      {"+multi-stage", with(true, false, FusionMode::attention, false), {}, 0.0},
      {"+diverse-dilations", with(true, true, FusionMode::attention, false), {}, 0.0},
      {"full (+extra branch)", with(true, true, FusionMode::attention, true), {}, 0.0},
      {"maxpool merge", with(false, false, FusionMode::maxpool, false), {}, 0.0},
      {"avgpool merge", with(false, false, FusionMode::avgpool, false), {}, 0.0},
  };
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of empty list");
  std::sort(xs.begin(), xs.end());
  const std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data,
                                const std::function<void(const std::string&)>& progress) {
  auto rows = ablation_rows(base.model.ablation);
  for (auto& row : rows) {
    for (auto seed : base.ablation_seeds) {
      RunConfig cfg = base;
      cfg.model.ablation = row.flags;
      cfg.seed = seed;
      cfg.out_dir.clear();
      cfg.resume.clear();
      const auto result = train(cfg, data);
      const double m = evaluate(cfg.model, result.state.params, data, false, cfg.batch_size).miou;
      row.miou.push_back(m);
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-22s seed=%" PRIu64 " final_loss=%.4f val_mIoU=%.4f", row.name.c_str(), seed,
                      result.log.empty() ? 0.0 : result.log.back().loss_total, m);
        progress(buf);
      }
    }
    row.median = median(row.miou);
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %-11s %-9s %-9s %-11s %-8s %s\n", "method", "multi-stage", "diverse",
                "fusion", "extra", "median", "per-seed mIoU");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %-11s %-9s %-9s %-11s %-8.4f", r.name.c_str(),
                  r.flags.multi_stage ? "yes" : "no", r.flags.diverse_dilations ? "yes" : "no",
                  to_string(r.flags.fusion).c_str(), r.flags.extra_branch ? "yes" : "no", r.median);
    os << buf;
    for (double m : r.miou) {
      std::snprintf(buf, sizeof buf, " %.4f", m);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

template <typename Scalar>
GradCheckReport gradcheck_model(const ModelConfig& cfg, const SynthSpec& data_spec, long batch,
                                std::size_t samples, double epsilon, std::uint64_t seed) {
  std::vector<SynthSample> gen;
  for (long i = 0; i < batch; ++i) gen.push_back(generate(data_spec, static_cast<std::uint64_t>(i)));
  std::vector<const TensorF*> imgs;
  std::vector<LabelMap> labs;
  for (const auto& g : gen) {
    imgs.push_back(&g.image);
    labs.push_back(resize_nearest(g.labels, g.labels.h / 4, g.labels.w / 4));
  }
  std::vector<const LabelMap*> lab_ptrs;
  for (const auto& l : labs) lab_ptrs.push_back(&l);
  const TensorF images = stack_images(imgs);
  const LabelMap labels = stack_labels(lab_ptrs);

  auto loss_fn = [&]<typename S>(Tape<S>& tape, const VarMap<S>& vars) {
    const auto out = model_forward(tape, vars, images.template cast<S>(), cfg);
    return total_loss(out.scores, out.fused, labels).total;
  };

  // Gradients under test come from a Scalar tape; the differences are always
  // taken in 64-bit, where h can be small without the loss rounding away.
  const auto params = init_params<Scalar>(cfg, seed);
  Tape<Scalar> tape;
  const auto grads = tape.backward(loss_fn(tape, register_parameters(tape, params)));

  ParamMap<double> params64;
  for (const auto& [name, t] : params) params64.emplace(name, t.template cast<double>());
  ForwardFn<double> forward = [&](Tape<double>& t, const VarMap<double>& vars) { return loss_fn(t, vars); };
  return compare_with_finite_differences<double, Scalar>(grads, forward, params64, epsilon, samples, seed);
}

template GradCheckReport gradcheck_model<float>(const ModelConfig&, const SynthSpec&, long, std::size_t, double,
                                                std::uint64_t);
template GradCheckReport gradcheck_model<double>(const ModelConfig&, const SynthSpec&, long, std::size_t, double,
                                                 std::uint64_t);

}  // namespace msat

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "synfoc/checkpoint.hpp"
#include "synfoc/config.hpp"
#include "synfoc/core.hpp"
#include "synfoc/data.hpp"
#include "synfoc/metrics.hpp"
#include "synfoc/models.hpp"
#include "synfoc/optim.hpp"

namespace synfoc {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelRole { kConvStudent, kConvTeacher, kFoundStudent, kFoundTeacher };

inline const char* to_string(ModelRole r) {
  switch (r) {
    case ModelRole::kConvStudent: return "conv-student";
    case ModelRole::kConvTeacher: return "conv-teacher";
    case ModelRole::kFoundStudent: return "found-student";
    default: return "found-teacher";
  }
}

/// Keeps freed tape buffers in the heap instead of returning them to the OS, which otherwise
/// re-faults hundreds of MB of pages every iteration.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Experiment log

struct IterationRecord {
  std::size_t iter = 0;
  std::uint64_t batch_seed = 0;
  double lambda = 0;
  double l_x = 0, l_u = 0, l_c = 0, l_d = 0, total = 0;
  std::vector<double> phi_self, phi_mut, alpha;
  // Pseudo-label DSC against the generator's ground truth; NaN when the model is absent.
  double pl_conv = std::nan("");
  double pl_found = std::nan("");
  double pl_ensemble = std::nan("");
};

struct EvalRecord {
  std::size_t iter = 0;
  ModelRole role = ModelRole::kFoundStudent;
  MetricReport report;
};

/// Append-only record of one run.
class ExperimentLog {
 public:
  void append(IterationRecord r) {
    if (!iterations_.empty() && r.iter <= iterations_.back().iter) throw TrainingError("log records must be appended in order");
    iterations_.push_back(std::move(r));
  }
  void append(EvalRecord r) { evals_.push_back(std::move(r)); }
  void flag(std::string deviation) {
    if (std::find(flags_.begin(), flags_.end(), deviation) == flags_.end()) flags_.push_back(std::move(deviation));
  }

  const std::vector<IterationRecord>& iterations() const noexcept { return iterations_; }
  const std::vector<EvalRecord>& evals() const noexcept { return evals_; }
  const std::vector<std::string>& flags() const noexcept { return flags_; }

  /// Latest report for a role, if any.
  const MetricReport* last_report(ModelRole role) const {
    for (auto it = evals_.rbegin(); it != evals_.rend(); ++it) {
      if (it->role == role) return &it->report;
    }
    return nullptr;
  }

  void write_log_csv(std::ostream& os) const {
    os << "iter,batch_seed,lambda,l_x,l_u,l_c,l_d,total,phi_self_mean,phi_mut_mean,alpha_mean,phi_self,phi_mut,alpha,"
          "pl_dsc_conv,pl_dsc_found,pl_dsc_ensemble\n";
    for (const auto& r : iterations_) {
      os << r.iter << ',' << r.batch_seed << ',' << num(r.lambda) << ',' << num(r.l_x) << ',' << num(r.l_u) << ','
         << num(r.l_c) << ',' << num(r.l_d) << ',' << num(r.total) << ',' << num(mean(r.phi_self)) << ','
         << num(mean(r.phi_mut)) << ',' << num(mean(r.alpha)) << ',' << join(r.phi_self) << ',' << join(r.phi_mut)
         << ',' << join(r.alpha) << ',' << num(r.pl_conv) << ',' << num(r.pl_found) << ',' << num(r.pl_ensemble)
         << '\n';
    }
  }

  void write_metrics_csv(std::ostream& os) const {
    os << "iter,model,domain,dsc,jaccard,hd95,asd,flagged\n";
    for (const auto& e : evals_) {
      for (const auto& d : e.report.domains) {
        os << e.iter << ',' << to_string(e.role) << ',' << d.domain << ',' << num(d.mean.dsc) << ','
           << num(d.mean.jaccard) << ',' << num(d.mean.hd95) << ',' << num(d.mean.asd) << ',' << d.flagged << '\n';
      }
      const auto& m = e.report.mean;
      os << e.iter << ',' << to_string(e.role) << ",mean," << num(m.dsc) << ',' << num(m.jaccard) << ','
         << num(m.hd95) << ',' << num(m.asd) << ',' << e.report.flagged << '\n';
    }
  }

  static std::string num(double v) {
    if (std::isnan(v)) return {};
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

 private:
  static double mean(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  static std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ';';
      out += num(v[i]);
    }
    return out;
  }

  std::vector<IterationRecord> iterations_;
  std::vector<EvalRecord> evals_;
  std::vector<std::string> flags_;
};

/// Averages of the pseudo-label quality trace.
struct TraceSummary {
  std::size_t iterations = 0;
  double ensemble = 0;
  double conv = 0;
  double found = 0;
  double pointwise_max = 0;  // mean over iterations of max(conv, found)
};

inline TraceSummary summarize_trace(const ExperimentLog& log) {
  TraceSummary s;
  for (const auto& r : log.iterations()) {
    if (std::isnan(r.pl_conv) || std::isnan(r.pl_found) || std::isnan(r.pl_ensemble)) continue;
    ++s.iterations;
    s.ensemble += r.pl_ensemble;
    s.conv += r.pl_conv;
    s.found += r.pl_found;
    s.pointwise_max += std::max(r.pl_conv, r.pl_found);
  }
  if (s.iterations) {
    const double n = static_cast<double>(s.iterations);
    s.ensemble /= n;
    s.conv /= n;
    s.found /= n;
    s.pointwise_max /= n;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batching and prediction helpers

namespace detail {

/// Stacks 1 x H x W images into N x 1 x H x W.
template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const auto& s0 = images.front()->shape();
  require_rank(s0, 3, "stack_images");
  const std::size_t plane = images.front()->size();
  Tensor<T> out({images.size(), s0[0], s0[1], s0[2]});
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_shape(images[i]->shape(), s0, "stack_images");
    std::transform(images[i]->data(), images[i]->data() + plane, out.data() + i * plane,
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

/// k distinct draws from `pool` (wrapping around when k exceeds the pool).
inline std::vector<std::size_t> draw_without_replacement(Rng& rng, std::vector<std::size_t> pool, std::size_t k) {
  std::vector<std::size_t> out;
  out.reserve(k);
  std::size_t next = pool.size();
  while (out.size() < k) {
    if (next == pool.size()) next = 0;
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(next),
                                                        static_cast<std::int64_t>(pool.size() - 1)));
    std::swap(pool[next], pool[j]);
    out.push_back(pool[next++]);
  }
  return out;
}

inline double mean_dsc(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  const std::size_t n = pred.dim(0);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = dsc(label_instance(pred, i), label_instance(gt, i), classes);
    for (double v : d) s += v;
  }
  return s / static_cast<double>(n * classes);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data(), t.data() + t.size(), [](T v) { return std::isfinite(static_cast<double>(v)); });
}

}  // namespace detail

template <typename T>
Tensor<T> conv_probs(ConvSegNet<T>& net, const Tensor<T>& images) {
  return softmax_channels(net.predict_logits(images));
}

/// Foundation probabilities brought back to the input resolution.
template <typename T>
Tensor<T> found_probs(FoundationSegNet<T>& net, const Tensor<T>& images) {
  return bilinear_resize(softmax_channels(net.predict_logits(images)), images.dim(2), images.dim(3));
}

/// Maps an N x 1 x H x W batch to N x H x W labels.
using Predictor = std::function<LabelMap(const Tensor<float>&)>;

/// Per-domain metrics of `predict` over the test split.
inline MetricReport evaluate_predictor(const Dataset& data, const Predictor& predict, std::size_t chunk = 20) {
  MetricAccumulator acc(data.classes());
  for (std::size_t d = 0; d < data.domain_count(); ++d) {
    const auto ids = data.manifest.test_ids(static_cast<int>(d));
    for (std::size_t b = 0; b < ids.size(); b += chunk) {
      std::vector<const Tensor<float>*> imgs;
      for (std::size_t i = b; i < std::min(ids.size(), b + chunk); ++i) imgs.push_back(&data.samples[ids[i]].image);
      const LabelMap pred = predict(detail::stack_images<float>(imgs));
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        acc.add(static_cast<int>(d), label_instance(pred, i), data.samples[ids[b + i]].label);
      }
    }
  }
  return acc.report();
}

template <typename T>
Predictor conv_predictor(ConvSegNet<T>& net) {
  return [&net](const Tensor<float>& x) { return argmax_channels(net.predict_logits(x.template cast<T>())); };
}

template <typename T>
Predictor found_predictor(FoundationSegNet<T>& net) {
  return [&net](const Tensor<float>& x) { return argmax_channels(found_probs(net, x.template cast<T>())); };
}

// ---------------------------------------------------------------------------
// Foundation pretraining

struct PretrainConfig {
  std::uint64_t seed = 20240601;
  std::size_t samples = 512;
  std::size_t holdout = 64;
  std::size_t epochs = 12;
  std::size_t batch = 8;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  std::size_t classes = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t distractors = 1;
  std::size_t rank = 4;
  double target_dsc = 0.80;
};

struct PretrainResult {
  Checkpoint ckpt;
  double holdout_dsc = 0;
  std::vector<double> epoch_loss;
};

inline PretrainConfig pretrain_config_for(const SplitConfig& s) {
  PretrainConfig p;
  p.seed = s.seed;
  p.classes = s.classes;
  p.height = s.height;
  p.width = s.width;
  p.distractors = s.distractors;
  return p;
}

/// Supervised pretraining of the whole foundation network on the objectness corpus, AdamW with
/// cosine decay, CE + Dice at input resolution. The checkpoint carries backbone and decoder.
template <typename T>
PretrainResult pretrain_foundation(const PretrainConfig& cfg, const std::function<void(std::size_t, double)>& progress = {}) {
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("pretraining needs positive batch and epoch counts");
  const auto corpus = generate_pretraining_corpus(cfg.seed, cfg.samples, cfg.classes, cfg.height, cfg.width, cfg.distractors);
  const auto holdout =
      generate_pretraining_corpus(cfg.seed, cfg.holdout, cfg.classes, cfg.height, cfg.width, cfg.distractors, 0x9E7B);
  Rng init = make_rng(cfg.seed, {0xF0D1});
  FoundationSegNet<T> net(cfg.classes, init, cfg.rank);
  Optimizer<T> opt(OptimizerConfig::adamw(cfg.lr, 0.9, 0.999, cfg.weight_decay));
  PretrainResult res;
  std::vector<std::size_t> order(corpus.size());
  const std::size_t steps_per_epoch = (corpus.size() + cfg.batch - 1) / cfg.batch;
  const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(cfg.seed, {0xF0D2, epoch});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      std::vector<Sample> views;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch); ++i) views.push_back(weak_augment(corpus[order[i]], rng));
      std::vector<const Tensor<float>*> imgs;
      std::vector<LabelMap> labels;
      for (const auto& v : views) {
        imgs.push_back(&v.image);
        labels.push_back(v.label);
      }
      const LabelMap y = stack_labels(labels);
      opt.mutable_config().lr = cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      Tape<T> tape;
      auto x = tape.constant(detail::stack_images<T>(imgs));
      auto logits = net.forward(tape, x, Mode::kTrain);
      auto p = bilinear_resize(softmax_channels(logits), cfg.height, cfg.width);
      const auto ones = ones_weight<T>(p.shape());
      auto loss = add(ce_loss(y, p, ones), dice_loss(y, p, ones));
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) throw TrainingError("pretraining loss is not finite at epoch " + std::to_string(epoch));
      tape.backward(loss);
      auto params = net.trainable_parameters();
      opt.step(params);
      zero_grads(params);
      loss_sum += lv;
      ++step;
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    if (progress) progress(epoch, res.epoch_loss.back());
  }
  MetricAccumulator acc(cfg.classes);
  for (std::size_t b = 0; b < holdout.size(); b += 16) {
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = b; i < std::min(holdout.size(), b + 16); ++i) imgs.push_back(&holdout[i].image);
    const LabelMap pred = argmax_channels(found_probs(net, detail::stack_images<T>(imgs)));
    for (std::size_t i = 0; i < imgs.size(); ++i) acc.add(0, label_instance(pred, i), holdout[b + i].label);
  }
  res.holdout_dsc = acc.report().mean.dsc;
  res.ckpt.meta["kind"] = "foundation-pretrained";
  res.ckpt.meta["classes"] = std::to_string(cfg.classes);
  res.ckpt.meta["height"] = std::to_string(cfg.height);
  res.ckpt.meta["width"] = std::to_string(cfg.width);
  res.ckpt.meta["seed"] = std::to_string(cfg.seed);
  res.ckpt.meta["holdout_dsc"] = ExperimentLog::num(res.holdout_dsc);
  store_parameters(res.ckpt, "", net.backbone_parameters());
  store_parameters(res.ckpt, "", net.decoder_parameters());
  return res;
}

// ---------------------------------------------------------------------------
// Training

template <typename T>
class Trainer {
 public:
  /// `foundation` is the pretraining checkpoint; required whenever the strategy uses the foundation model.
  Trainer(TrainConfig cfg, const Dataset& data, const Checkpoint* foundation)
      : cfg_(std::move(cfg)), data_(data), conv_opt_(cfg_.conv_opt), found_opt_(cfg_.found_opt) {
    cfg_.validate();
    if (cfg_.conv_opt.kind != OptimizerKind::kSgdMomentum && cfg_.conv_opt.kind != OptimizerKind::kAdamW) {
      throw ConfigError("unknown optimizer kind");
    }
    labeled_ = data_.manifest.ids(Split::kLabeled);
    unlabeled_ = data_.manifest.ids(Split::kUnlabeled);
    if (labeled_.empty() || unlabeled_.empty()) throw ConfigError("dataset needs labeled and unlabeled samples");
    const std::size_t classes = data_.classes();
    if (uses_conventional(cfg_.strategy)) {
      Rng rng = make_rng(cfg_.seed, {0xC0DE});
      conv_.emplace(ConvSegNet<T>(classes, rng), cfg_.ema_decay);
    }
    if (uses_foundation(cfg_.strategy)) {
      if (foundation == nullptr) throw ConfigError("strategy " + to_string(cfg_.strategy) + " needs a foundation checkpoint");
      if (foundation->meta_value("classes") != std::to_string(classes)) {
        throw ConfigError("foundation checkpoint class count does not match the dataset");
      }
      Rng rng = make_rng(cfg_.seed, {0xF0D1});
      FoundationSegNet<T> net(classes, rng, cfg_.lora_rank);
      restore_parameters(*foundation, "", net.backbone_parameters());
      restore_parameters(*foundation, "", net.decoder_parameters());
      Rng adapters = make_rng(cfg_.seed, {0xADA7});
      net.freeze_backbone(adapters);
      found_.emplace(std::move(net), cfg_.ema_decay);
      for (auto* p : found_->student.backbone_parameters()) frozen_.push_back(p->value);
    }
    if (cfg_.certain_paste) log_.flag("weight map: pasted labeled region weighted 1");
    else log_.flag("weight map: unlabeled confidence kept under the pasted region");
    if (cfg_.s_norm == SNorm::kElementCount) log_.flag("consensus/divergence normalizer: element count N(C+1)HW");
    else log_.flag("consensus/divergence normalizer: NHWC");
    if (!cfg_.smc && cfg_.strategy == Strategy::kSynFoC) log_.flag("SMC off: constant 0.5 ensemble ratio");
    if (!cfg_.cdcr && is_synergistic(cfg_.strategy)) log_.flag("CDCR off");
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const ExperimentLog& log() const noexcept { return log_; }
  std::size_t iterations_done() const noexcept { return next_iter_; }
  bool has_conventional() const noexcept { return conv_.has_value(); }
  bool has_foundation() const noexcept { return found_.has_value(); }
  TeacherStudentPair<ConvSegNet<T>>& conventional() { return conv_.value(); }
  TeacherStudentPair<FoundationSegNet<T>>& foundation() { return found_.value(); }

  /// Runs the remaining iterations, evaluating every eval_interval iterations and at the end.
  void run(const std::function<void(const IterationRecord&)>& progress = {}) {
    while (next_iter_ < cfg_.t_max) {
      const auto& rec = step();
      if (progress) progress(rec);
      const bool last = next_iter_ == cfg_.t_max;
      if (last || (cfg_.eval_interval > 0 && next_iter_ % cfg_.eval_interval == 0)) evaluate_all();
    }
  }

  /// One training iteration.
  const IterationRecord& step() {
    const std::size_t t = next_iter_;
    IterationRecord rec;
    rec.iter = t;
    rec.batch_seed = derive_seed(cfg_.seed, {0xBA7C, t});
    rec.lambda = warmup_lambda(static_cast<double>(t), static_cast<double>(cfg_.t_max));
    const Batch batch = draw_batch(rec.batch_seed);
    const std::size_t nl = cfg_.labeled_batch, nu = cfg_.unlabeled_batch;
    const std::size_t classes = data_.classes(), h = data_.height(), w = data_.width();

    // Teachers on the weak unlabeled view.
    const Tensor<T> u_w = detail::stack_images<T>(batch.u_w_images());
    std::optional<Tensor<T>> p_ut, p_ms;
    if (conv_) p_ut = conv_probs(conv_->teacher, u_w);
    if (found_) p_ms = found_probs(found_->teacher, u_w);
    const LabelMap u_gt = batch.u_w_labels();

    EnsembleResult<T> en;
    if (conv_ && found_) {
      const LabelMap q_ut = argmax_channels(*p_ut), q_ms = argmax_channels(*p_ms);
      const LabelMap q_student = argmax_channels(conv_probs(conv_->student, u_w));
      rec.phi_self = self_confidence(q_student, q_ut, classes);
      rec.phi_mut = mutual_confidence(q_ms, q_ut, classes);
      for (std::size_t i = 0; i < nu; ++i) {
        const Strategy s = (!cfg_.smc && cfg_.strategy == Strategy::kSynFoC) ? Strategy::kConstant : cfg_.strategy;
        rec.alpha.push_back(ensemble_ratio(rec.phi_self[i], rec.phi_mut[i], s, static_cast<double>(t),
                                           static_cast<double>(cfg_.t_max)));
      }
      en = ensemble_pseudo(*p_ut, *p_ms, rec.alpha);
      rec.pl_conv = detail::mean_dsc(q_ut, u_gt, classes);
      rec.pl_found = detail::mean_dsc(q_ms, u_gt, classes);
    } else {
      en.probs = conv_ ? *p_ut : *p_ms;
      en.labels = argmax_channels(en.probs);
      (conv_ ? rec.pl_conv : rec.pl_found) = detail::mean_dsc(en.labels, u_gt, classes);
    }
    rec.pl_ensemble = detail::mean_dsc(en.labels, u_gt, classes);

    // Copy-Paste composites and their targets.
    std::vector<Tensor<float>> composites;
    std::vector<LabelMap> targets;
    for (std::size_t i = 0; i < nu; ++i) {
      const std::size_t li = i % nl;
      auto pasted = copy_paste(batch.labeled[li].image, batch.u_s[i], batch.labeled[li].label,
                               label_instance(en.labels, i), batch.masks[i]);
      composites.push_back(std::move(pasted.image));
      targets.push_back(std::move(pasted.label));
    }
    const LabelMap q_c = stack_labels(targets);
    const Tensor<T> w_c = confidence_weight(en.probs, cfg_.tau, batch.masks, cfg_.certain_paste);
    std::vector<LabelMap> y_list;
    std::vector<const Tensor<float>*> inputs;
    for (const auto& s : batch.labeled) {
      y_list.push_back(s.label);
      inputs.push_back(&s.image);
    }
    for (const auto& c : composites) inputs.push_back(&c);
    const LabelMap y_w = stack_labels(y_list);

    // Students on X_w and U_c in one pass.
    Tape<T> tape;
    auto x = tape.constant(detail::stack_images<T>(inputs));
    std::optional<Var<T>> pu, pm;
    if (conv_) pu = softmax_channels(conv_->student.forward(tape, x, Mode::kTrain));
    if (found_) pm = bilinear_resize(softmax_channels(found_->student.forward(tape, x, Mode::kTrain)), h, w);
    Var<T> l_x, l_u;
    Var<T> l_c = tape.constant(Tensor<T>::scalar(T{0}));
    Var<T> l_d = tape.constant(Tensor<T>::scalar(T{0}));
    if (pu && pm) {
      auto pxu = slice_batch(*pu, 0, nl), pxm = slice_batch(*pm, 0, nl);
      auto pcu = slice_batch(*pu, nl, nu), pcm = slice_batch(*pm, nl, nu);
      l_x = supervised_loss(pxu, pxm, y_w);
      l_u = unsupervised_loss(q_c, pcu, pcm, w_c);
      if (cfg_.cdcr) {
        const auto masks = region_masks(pcu.value(), pcm.value());
        l_c = consensus_entropy_loss(pcu, pcm, masks.consensus, cfg_.s_norm);
        l_d = divergence_mse_loss(pcu, pcm, masks.divergence, cfg_.s_norm);
      }
    } else {
      auto p = pu ? *pu : *pm;
      auto px = slice_batch(p, 0, nl), pc = slice_batch(p, nl, nu);
      const auto ones = ones_weight<T>(px.shape());
      l_x = add(ce_loss(y_w, px, ones), dice_loss(y_w, px, ones));
      l_u = add(ce_loss(q_c, pc, w_c), dice_loss(q_c, pc, w_c));
    }
    auto total = total_loss(l_x, l_u, l_c, l_d, static_cast<double>(t), static_cast<double>(cfg_.t_max));
    rec.l_x = static_cast<double>(l_x.value().item());
    rec.l_u = static_cast<double>(l_u.value().item());
    rec.l_c = static_cast<double>(l_c.value().item());
    rec.l_d = static_cast<double>(l_d.value().item());
    rec.total = static_cast<double>(total.value().item());
    if (!std::isfinite(rec.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << t << " (batch seed " << rec.batch_seed << "; l_x=" << rec.l_x
          << " l_u=" << rec.l_u << " l_c=" << rec.l_c << " l_d=" << rec.l_d << ")";
      throw TrainingError(msg.str());
    }

    tape.backward(total);
    if (conv_) {
      auto params = conv_->student.trainable_parameters();
      conv_opt_.step(params);
      zero_grads(params);
      ema_update(*conv_);
    }
    if (found_) {
      auto params = found_->student.trainable_parameters();
      found_opt_.step(params);
      zero_grads(params);
      ema_update(*found_);
    }
    log_.append(std::move(rec));
    ++next_iter_;
    return log_.iterations().back();
  }

  /// Throws if any frozen backbone weight moved in either foundation network.
  void audit_backbone() {
    if (!found_) return;
    for (auto* net : {&found_->student, &found_->teacher}) {
      const auto params = net->backbone_parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->trainable || !(params[i]->value == frozen_[i])) {
          throw TrainingError("frozen backbone changed: " + params[i]->name);
        }
      }
    }
  }

  MetricReport evaluate(ModelRole role) {
    switch (role) {
      case ModelRole::kConvStudent: return evaluate_predictor(data_, conv_predictor(conventional().student));
      case ModelRole::kConvTeacher: return evaluate_predictor(data_, conv_predictor(conventional().teacher));
      case ModelRole::kFoundStudent: return evaluate_predictor(data_, found_predictor(foundation().student));
      default: return evaluate_predictor(data_, found_predictor(foundation().teacher));
    }
  }

  /// Audits the backbone, then evaluates every model present and logs the reports.
  void evaluate_all() {
    audit_backbone();
    for (auto role : roles()) log_.append(EvalRecord{next_iter_, role, evaluate(role)});
  }

  std::vector<ModelRole> roles() const {
    std::vector<ModelRole> out;
    if (conv_) out.insert(out.end(), {ModelRole::kConvStudent, ModelRole::kConvTeacher});
    if (found_) out.insert(out.end(), {ModelRole::kFoundStudent, ModelRole::kFoundTeacher});
    return out;
  }

  Checkpoint checkpoint() {
    Checkpoint c;
    c.meta["kind"] = "synfoc-run";
    c.meta["strategy"] = to_string(cfg_.strategy);
    c.meta["classes"] = std::to_string(data_.classes());
    c.meta["lora_rank"] = std::to_string(cfg_.lora_rank);
    c.meta["iterations"] = std::to_string(next_iter_);
    c.meta["seed"] = std::to_string(cfg_.seed);
    if (conv_) {
      store_parameters(c, "conv.student.", conv_->student.parameters());
      store_parameters(c, "conv.teacher.", conv_->teacher.parameters());
      store_optimizer(c, "conv.opt.", conv_opt_, conv_->student.trainable_parameters());
    }
    if (found_) {
      store_parameters(c, "found.student.", found_->student.parameters());
      store_parameters(c, "found.teacher.", found_->teacher.parameters());
      store_optimizer(c, "found.opt.", found_opt_, found_->student.trainable_parameters());
    }
    return c;
  }

 private:
  struct Batch {
    std::vector<Sample> labeled;     // weak views (X_w, Y_w)
    std::vector<Sample> unlabeled;   // weak views U_w with generator labels for diagnostics
    std::vector<Tensor<float>> u_s;  // strong views
    std::vector<PasteMask> masks;

    std::vector<const Tensor<float>*> u_w_images() const {
      std::vector<const Tensor<float>*> out;
      for (const auto& s : unlabeled) out.push_back(&s.image);
      return out;
    }
    LabelMap u_w_labels() const {
      std::vector<LabelMap> out;
      for (const auto& s : unlabeled) out.push_back(s.label);
      return stack_labels(out);
    }
  };

  /// All randomness of one iteration comes from the batch seed, so every strategy sees the same data.
  Batch draw_batch(std::uint64_t batch_seed) const {
    Rng rng(batch_seed);
    Batch b;
    const auto li = detail::draw_without_replacement(rng, labeled_, cfg_.labeled_batch);
    const auto ui = detail::draw_without_replacement(rng, unlabeled_, cfg_.unlabeled_batch);
    for (auto id : li) b.labeled.push_back(weak_augment(data_.samples[id], rng));
    for (auto id : ui) b.unlabeled.push_back(weak_augment(data_.samples[id], rng));
    for (const auto& s : b.unlabeled) b.u_s.push_back(strong_augment(s.image, rng));
    for (std::size_t i = 0; i < ui.size(); ++i) {
      b.masks.push_back(make_paste_mask(data_.height(), data_.width(), {cfg_.paste_min, cfg_.paste_max}, rng));
    }
    return b;
  }

  TrainConfig cfg_;
  const Dataset& data_;
  std::vector<std::size_t> labeled_, unlabeled_;
  std::optional<TeacherStudentPair<ConvSegNet<T>>> conv_;
  std::optional<TeacherStudentPair<FoundationSegNet<T>>> found_;
  std::vector<Tensor<T>> frozen_;
  Optimizer<T> conv_opt_, found_opt_;
  ExperimentLog log_;
  std::size_t next_iter_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint evaluation

struct CheckpointReport {
  std::vector<std::pair<ModelRole, MetricReport>> reports;
};

/// Rebuilds every network stored in a run checkpoint and evaluates it on the test split.
template <typename T>
CheckpointReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& data) {
  if (ckpt.meta.count("kind") == 0 || ckpt.meta_value("kind") != "synfoc-run") {
    throw FormatError("not a training checkpoint");
  }
  const std::size_t classes = std::stoul(ckpt.meta_value("classes"));
  if (classes != data.classes()) throw ConfigError("checkpoint class count does not match the dataset");
  const std::size_t rank = std::stoul(ckpt.meta_value("lora_rank"));
  CheckpointReport out;
  Rng rng(0);
  for (const char* who : {"student", "teacher"}) {
    const std::string prefix = std::string("conv.") + who + ".";
    if (!ckpt.has(prefix + "head.weight")) continue;
    ConvSegNet<T> net(classes, rng);
    restore_parameters(ckpt, prefix, net.parameters());
    const auto role = std::string(who) == "student" ? ModelRole::kConvStudent : ModelRole::kConvTeacher;
    out.reports.emplace_back(role, evaluate_predictor(data, conv_predictor(net)));
  }
  for (const char* who : {"student", "teacher"}) {
    const std::string prefix = std::string("found.") + who + ".";
    if (!ckpt.has(prefix + "decoder.head.weight")) continue;
    FoundationSegNet<T> net(classes, rng, rank);
    restore_parameters(ckpt, prefix, net.parameters());
    net.set_frozen(true);
    const auto role = std::string(who) == "student" ? ModelRole::kFoundStudent : ModelRole::kFoundTeacher;
    out.reports.emplace_back(role, evaluate_predictor(data, found_predictor(net)));
  }
  if (out.reports.empty()) throw FormatError("checkpoint holds no networks");
  return out;
}

// ---------------------------------------------------------------------------
// Run outputs and the strategy suite

struct RunResult {
  Strategy strategy = Strategy::kSynFoC;
  ExperimentLog log;
  std::optional<MetricReport> conv_student, found_student;
  double seconds = 0;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline std::string format_report_table(const std::vector<std::pair<std::string, const MetricReport*>>& rows) {
  std::ostringstream os;
  os << "| model | domain | DSC | Jaccard | HD95 | ASD |\n|---|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& [name, r] : rows) {
    for (const auto& d : r->domains) {
      std::snprintf(buf, sizeof buf, "| %s | %d | %.4f | %.4f | %.3f | %.3f |\n", name.c_str(), d.domain, d.mean.dsc,
                    d.mean.jaccard, d.mean.hd95, d.mean.asd);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "| %s | mean | %.4f | %.4f | %.3f | %.3f |\n", name.c_str(), r->mean.dsc,
                  r->mean.jaccard, r->mean.hd95, r->mean.asd);
    os << buf;
  }
  return os.str();
}

/// Writes log.csv, metrics.csv, summary.md, config.txt and checkpoint.ckpt into `dir`.
template <typename T>
void write_run_outputs(const std::filesystem::path& dir, Trainer<T>& trainer, double seconds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "log.csv", std::ios::binary);
    trainer.log().write_log_csv(os);
  }
  {
    std::ofstream os(dir / "metrics.csv", std::ios::binary);
    trainer.log().write_metrics_csv(os);
  }
  write_text(dir / "config.txt", format_config(trainer.config()));
  save_checkpoint(dir / "checkpoint.ckpt", trainer.checkpoint());
  std::ostringstream md;
  md << "# Run: " << to_string(trainer.config().strategy) << "\n\n";
  md << "- iterations: " << trainer.iterations_done() << "\n- seed: " << trainer.config().seed << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", seconds);
  md << "- wall time (s): " << buf << "\n";
  for (const auto& f : trainer.log().flags()) md << "- flag: " << f << "\n";
  const auto trace = summarize_trace(trainer.log());
  if (trace.iterations) {
    std::snprintf(buf, sizeof buf, "%.4f / %.4f / %.4f", trace.ensemble, trace.conv, trace.found);
    md << "- mean pseudo-label DSC ensemble / conventional / foundation: " << buf << "\n";
  }
  std::vector<std::pair<std::string, const MetricReport*>> rows;
  for (auto role : trainer.roles()) {
    if (const auto* r = trainer.log().last_report(role)) rows.emplace_back(to_string(role), r);
  }
  if (!rows.empty()) md << "\n## Final test metrics\n\n" << format_report_table(rows);
  write_text(dir / "summary.md", md.str());
}

/// Trains one configuration and writes its outputs to cfg.out_dir (if non-empty).
template <typename T>
RunResult run_training(const TrainConfig& cfg, const Dataset& data, const Checkpoint* foundation,
                       const std::function<void(const IterationRecord&)>& progress = {}) {
  const auto start = std::chrono::steady_clock::now();
  Trainer<T> trainer(cfg, data, foundation);
  trainer.run(progress);
  RunResult res;
  res.strategy = cfg.strategy;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (const auto* r = trainer.log().last_report(ModelRole::kConvStudent)) res.conv_student = *r;
  if (const auto* r = trainer.log().last_report(ModelRole::kFoundStudent)) res.found_student = *r;
  if (!cfg.out_dir.empty()) write_run_outputs(cfg.out_dir, trainer, res.seconds);
  res.log = trainer.log();
  return res;
}

inline RunResult run_training(const TrainConfig& cfg, const Dataset& data, const Checkpoint* foundation,
                              const std::function<void(const IterationRecord&)>& progress = {}) {
  return cfg.precision == Precision::kFloat64 ? run_training<double>(cfg, data, foundation, progress)
                                              : run_training<float>(cfg, data, foundation, progress);
}

/// Parallelism cap for the suite: SYNFOC_THREADS if set, else hardware concurrency.
inline std::size_t suite_threads() {
  if (const char* env = std::getenv("SYNFOC_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError("SYNFOC_THREADS must be a positive integer");
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

inline std::string suite_csv(const std::vector<RunResult>& runs) {
  std::ostringstream os;
  os << "strategy,conv_dsc,conv_jaccard,conv_hd95,conv_asd,found_dsc,found_jaccard,found_hd95,found_asd\n";
  auto cells = [&](const std::optional<MetricReport>& r) {
    if (!r) return std::string(",,,");
    return ExperimentLog::num(r->mean.dsc) + ',' + ExperimentLog::num(r->mean.jaccard) + ',' +
           ExperimentLog::num(r->mean.hd95) + ',' + ExperimentLog::num(r->mean.asd);
  };
  for (const auto& r : runs) os << to_string(r.strategy) << ',' << cells(r.conv_student) << ',' << cells(r.found_student) << '\n';
  return os.str();
}

inline std::string suite_markdown(const std::vector<RunResult>& runs, double seconds) {
  std::ostringstream os;
  char buf[200];
  os << "# Strategy suite\n\nFinal mean test metrics across domains (students). Headline: foundation student.\n\n";
  os << "| strategy | conv DSC | conv HD95 | found DSC | found Jaccard | found HD95 | found ASD | time (s) |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    auto f = [](const std::optional<MetricReport>& m, int which) {
      if (!m) return std::string("-");
      const double v = which == 0 ? m->mean.dsc : which == 1 ? m->mean.jaccard : which == 2 ? m->mean.hd95 : m->mean.asd;
      char b[32];
      std::snprintf(b, sizeof b, "%.4f", v);
      return std::string(b);
    };
    std::snprintf(buf, sizeof buf, "| %s | %s | %s | %s | %s | %s | %s | %.1f |\n", to_string(r.strategy).c_str(),
                  f(r.conv_student, 0).c_str(), f(r.conv_student, 2).c_str(), f(r.found_student, 0).c_str(),
                  f(r.found_student, 1).c_str(), f(r.found_student, 2).c_str(), f(r.found_student, 3).c_str(),
                  r.seconds);
    os << buf;
  }
  for (const auto& r : runs) {
    if (r.strategy != Strategy::kSynFoC) continue;
    const auto trace = summarize_trace(r.log);
    std::snprintf(buf, sizeof buf,
                  "\nSynFoC pseudo-label DSC over %zu iterations: ensemble %.4f, conventional %.4f, foundation %.4f, "
                  "per-iteration max %.4f.\n",
                  trace.iterations, trace.ensemble, trace.conv, trace.found, trace.pointwise_max);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "\nTotal wall time: %.1f s.\n", seconds);
  os << buf;
  return os.str();
}

/// Runs every strategy in cfg.suite_strategies under one master seed. Each strategy writes to
/// out_dir/<strategy>/; the suite writes suite.csv and summary.md to out_dir.
inline std::vector<RunResult> run_suite(const TrainConfig& cfg, const Dataset& data, const Checkpoint* foundation,
                                        const std::filesystem::path& out_dir, std::size_t threads,
                                        const std::function<void(const std::string&)>& note = {}) {
  const auto start = std::chrono::steady_clock::now();
  const auto& strategies = cfg.suite_strategies;
  std::vector<RunResult> results(strategies.size());
  std::vector<std::exception_ptr> errors(strategies.size());
  std::atomic<std::size_t> next{0};
  std::mutex note_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < strategies.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.strategy = strategies[i];
        c.out_dir = (out_dir / to_string(strategies[i])).string();
        results[i] = run_training(c, data, foundation);
        if (note) {
          std::lock_guard lock(note_mu);
          char buf[64];
          std::snprintf(buf, sizeof buf, " done in %.1f s", results[i].seconds);
          note(to_string(strategies[i]) + buf);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, strategies.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "suite.csv", suite_csv(results));
  write_text(out_dir / "summary.md", suite_markdown(results, seconds));
  return results;
}

}  // namespace synfoc

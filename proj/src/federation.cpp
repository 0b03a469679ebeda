#include "fedsim/federation.hpp"

#include <algorithm>
#include <cmath>

#include "fedsim/evaluation.hpp"
#include "fedsim/kernels.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/rng.hpp"

namespace fedsim::fed {

namespace {

constexpr std::uint64_t kTagOrder = 0x6f72646572ull;

void check_weights(const std::vector<double>& weights, std::size_t n) {
  if (weights.size() != n)
    throw ValidationError("aggregate: weight count does not match input count");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ValidationError("aggregate: weights must be nonnegative");
    sum += w;
  }
  if (std::fabs(sum - 1.0) > 1e-9)
    throw ValidationError("aggregate: weights must sum to 1 (got " + std::to_string(sum) + ")");
}

std::vector<double> weighted_sum(const std::vector<const std::vector<double>*>& vectors,
                                 const std::vector<double>& weights) {
  // Start from the first nonzero-weight vector so that degenerate weights
  // ({1,0,...}) reproduce that input bitwise.
  const auto& k = kernels::ops();
  const std::size_t len = vectors[0]->size();
  std::size_t first = vectors.size();
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i]->size() != len)
      throw ValidationError("aggregate: input vectors have different lengths");
    if (first == vectors.size() && weights[i] != 0.0) first = i;
  }
  std::vector<double> acc(len, 0.0);
  if (first == vectors.size()) return acc;  // all weights zero (sum check rejects this)
  k.scale_into(weights[first], vectors[first]->data(), acc.data(), len);
  for (std::size_t i = first + 1; i < vectors.size(); ++i)
    if (weights[i] != 0.0) k.axpy(weights[i], vectors[i]->data(), acc.data(), len);
  return acc;
}

}  // namespace

std::vector<double> aggregate_gradients(const std::vector<std::vector<double>>& gradients,
                                        const std::vector<double>& weights) {
  if (gradients.empty()) throw ValidationError("aggregate_gradients: no gradients");
  check_weights(weights, gradients.size());
  std::vector<const std::vector<double>*> ptrs;
  ptrs.reserve(gradients.size());
  for (const auto& g : gradients) ptrs.push_back(&g);
  return weighted_sum(ptrs, weights);
}

nn::ModelState aggregate_weights(const std::vector<nn::ModelState>& models,
                                 const std::vector<double>& weights) {
  if (models.empty()) throw ValidationError("aggregate_weights: no models");
  check_weights(weights, models.size());
  for (const auto& m : models)
    if (!(m.arch == models[0].arch))
      throw ValidationError("aggregate_weights: models have different architectures");
  std::vector<std::vector<double>> flats;
  flats.reserve(models.size());
  for (const auto& m : models) flats.push_back(nn::flatten_params(m));
  std::vector<const std::vector<double>*> ptrs;
  for (const auto& f : flats) ptrs.push_back(&f);
  nn::ModelState out = nn::unflatten_params(models[0], weighted_sum(ptrs, weights));
  // bn buffers already copied from models[0] via the unflatten base
  return out;
}

std::vector<double> aggregate_bn_buffers(const std::vector<nn::ModelState>& models,
                                         const std::vector<double>& weights) {
  if (models.empty()) throw ValidationError("aggregate_bn_buffers: no models");
  check_weights(weights, models.size());
  for (const auto& m : models)
    if (!(m.arch == models[0].arch))
      throw ValidationError("aggregate_bn_buffers: models have different architectures");
  std::vector<std::vector<double>> flats;
  flats.reserve(models.size());
  for (const auto& m : models) flats.push_back(nn::flatten_buffers(m));
  std::vector<const std::vector<double>*> ptrs;
  for (const auto& f : flats) ptrs.push_back(&f);
  return weighted_sum(ptrs, weights);
}

// ---- deterministic minibatch scheduling -----------------------------------------

namespace {

/// Institution-local infinite stream of size-B minibatches: each pass is a
/// fresh permutation derived from (order seed, institution, pass index);
/// within a pass, batches are consecutive slices with the remainder dropped.
class MinibatchStream {
 public:
  MinibatchStream(const data::LabeledDataset& ds, int batch_size, std::uint64_t order_seed,
                  int institution)
      : ds_(&ds), batch_(static_cast<std::size_t>(batch_size)), seed_(order_seed),
        institution_(institution) {
    if (ds.size() < batch_)
      throw ValidationError("institution " + std::to_string(institution) + " has " +
                            std::to_string(ds.size()) + " training samples, fewer than batch size " +
                            std::to_string(batch_size));
    reshuffle();
  }

  std::size_t batches_per_pass() const { return ds_->size() / batch_; }

  void next(Tensor& images, std::vector<int>& labels) {
    if (cursor_ + batch_ > batches_per_pass() * batch_) reshuffle();
    const std::size_t px = ds_->channels() * ds_->height() * ds_->width();
    images = Tensor::zeros({batch_, ds_->channels(), ds_->height(), ds_->width()});
    labels.resize(batch_);
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::size_t row = perm_[cursor_ + i];
      std::copy_n(ds_->images.ptr() + row * px, px, images.ptr() + i * px);
      labels[i] = ds_->labels[row];
    }
    cursor_ += batch_;
  }

 private:
  void reshuffle() {
    rng::Stream st(rng::derive(seed_, {kTagOrder, static_cast<std::uint64_t>(institution_), pass_}));
    perm_ = st.permutation(ds_->size());
    cursor_ = 0;
    ++pass_;
  }

  const data::LabeledDataset* ds_;
  std::size_t batch_;
  std::uint64_t seed_;
  int institution_;
  std::uint64_t pass_ = 0;
  std::vector<std::uint32_t> perm_;
  std::size_t cursor_ = 0;
};

struct InstitutionCtx {
  const skew::InstitutionShard* shard = nullptr;
  MinibatchStream stream;
  nn::CategoryWeights loss_weights;
  nn::ModelState model;
};

void set_params(nn::ModelState& m, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& p : m.params) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(),
                p.value.data.begin());
    off += p.value.size();
  }
}

void set_buffers(nn::ModelState& m, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& b : m.bn_buffers) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), b.value.size(),
                b.value.data.begin());
    off += b.value.size();
  }
}

void sgd_in_place(std::vector<double>& params, const std::vector<double>& grad, double lr) {
  kernels::ops().axpy(-lr, grad.data(), params.data(), params.size());
}

struct Harness {
  std::vector<InstitutionCtx> insts;
  data::LabeledDataset pooled_val;
  std::vector<double> agg_weights;  // Q_i / Q
  std::vector<double> uniform_weights;

  // selection state
  double best_metric = 0.0;
  int best_round = -1;
  nn::ModelState best_global;
  std::vector<nn::ModelState> best_inst_models;

  void consider(int round, const nn::ModelState& global,
                const std::vector<nn::ModelState>& inst_models, bool wl, RoundLog& log) {
    const double metric = eval::selection_metric(global, pooled_val, wl);
    log.val_metric = metric;
    if (best_round < 0 || metric < best_metric) {
      best_metric = metric;
      best_round = round;
      best_global = global;
      best_inst_models = inst_models;
    }
  }
};

Harness make_harness(const std::vector<skew::InstitutionShard>& shards,
                     const nn::Architecture& arch, const ProtocolConfig& cfg) {
  if (shards.empty()) throw ValidationError("protocol: no institution shards");
  if (cfg.batch_size < 2)
    throw ValidationError("protocol: batch size must be >= 2 (batch-norm constraint)");
  if (cfg.max_epochs < 0) throw ValidationError("protocol: negative epoch budget");
  Harness h;
  std::int64_t total = 0;
  std::vector<const data::LabeledDataset*> vals;
  for (const auto& s : shards) {
    if (s.train.size() == 0)
      throw ValidationError("protocol: institution " + std::to_string(s.institution_id) +
                            " has an empty training shard");
    total += s.size();
    if (s.val.size() > 0) vals.push_back(&s.val);
  }
  if (vals.empty())
    throw ValidationError("protocol: no validation data in any shard (needed for selection)");
  h.pooled_val = data::concat(vals);

  const nn::ModelState init = nn::build_model(arch, cfg.model_seed);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const auto& s = shards[i];
    InstitutionCtx ctx{
        &s,
        MinibatchStream(s.train, cfg.batch_size, cfg.data_order_seed, s.institution_id),
        cfg.mitigations.wl ? nn::class_weights(s.label_histogram)
                           : nn::unit_weights(s.train.num_categories),
        init,
    };
    h.insts.push_back(std::move(ctx));
    h.agg_weights.push_back(static_cast<double>(s.size()) / static_cast<double>(total));
    h.uniform_weights.push_back(1.0 / static_cast<double>(shards.size()));
  }
  return h;
}

std::vector<nn::ModelState> snapshot_models(const Harness& h) {
  std::vector<nn::ModelState> out;
  out.reserve(h.insts.size());
  for (const auto& c : h.insts) out.push_back(c.model);
  return out;
}

RunOutput finish(Harness&& h, std::vector<RoundLog>&& rounds, const nn::ModelState& fallback) {
  RunOutput out;
  out.rounds = std::move(rounds);
  out.selected_round = h.best_round;
  if (h.best_round < 0) {
    out.selected = fallback;
    out.institution_models = snapshot_models(h);
  } else {
    out.selected = std::move(h.best_global);
    out.institution_models = std::move(h.best_inst_models);
  }
  return out;
}

}  // namespace

RunOutput run_fedsgd(const std::vector<skew::InstitutionShard>& shards,
                     const nn::Architecture& arch, const ProtocolConfig& cfg,
                     const TraceFn& trace) {
  Harness h = make_harness(shards, arch, cfg);
  const std::size_t n = h.insts.size();
  const std::vector<double>& weights = cfg.mitigations.wp ? h.agg_weights : h.uniform_weights;

  std::size_t max_q = 0;
  for (const auto& c : h.insts) max_q = std::max(max_q, c.shard->train.size());
  const std::size_t iters_per_epoch =
      (max_q + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);

  std::vector<double> global_params = nn::flatten_params(h.insts[0].model);
  std::vector<RoundLog> rounds;
  long long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    RoundLog log;
    log.round = epoch;
    log.train_loss.assign(n, 0.0);

    std::vector<std::vector<double>> grads(n);
    std::vector<std::vector<double>> buffers(n);
    std::vector<double> losses(n);
    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      parallel_for(n, cfg.threads, [&](std::size_t i) {
        Tensor images;
        std::vector<int> labels;
        h.insts[i].stream.next(images, labels);
        auto bw = nn::backward(h.insts[i].model, images, labels, h.insts[i].loss_weights);
        grads[i] = std::move(bw.gradient);
        buffers[i] = std::move(bw.updated_buffers);
        losses[i] = bw.loss;
      });

      const std::vector<double> agg = aggregate_gradients(grads, weights);
      sgd_in_place(global_params, agg, cfg.learning_rate);
      for (std::size_t i = 0; i < n; ++i) {
        set_params(h.insts[i].model, global_params);
        log.train_loss[i] += losses[i];
      }
      if (cfg.mitigations.bn_avg) {
        std::vector<const std::vector<double>*> ptrs;
        for (const auto& b : buffers) ptrs.push_back(&b);
        const std::vector<double> agg_buf = weighted_sum(ptrs, weights);
        for (std::size_t i = 0; i < n; ++i) set_buffers(h.insts[i].model, agg_buf);
      } else {
        for (std::size_t i = 0; i < n; ++i) set_buffers(h.insts[i].model, buffers[i]);
      }
      if (trace) trace(step, global_params);
      ++step;
    }
    for (std::size_t i = 0; i < n; ++i)
      log.train_loss[i] /= static_cast<double>(iters_per_epoch);
    log.comm_events = 2LL * static_cast<long long>(n) * static_cast<long long>(iters_per_epoch);

    // Global model: shared params; buffers are shared under bn_avg, otherwise
    // institution 0's (aggregate_weights contract).
    nn::ModelState global = h.insts[0].model;
    h.consider(epoch, global, snapshot_models(h), cfg.mitigations.wl, log);
    rounds.push_back(std::move(log));
  }
  return finish(std::move(h), std::move(rounds), h.insts[0].model);
}

RunOutput run_fedavg(const std::vector<skew::InstitutionShard>& shards,
                     const nn::Architecture& arch, const ProtocolConfig& cfg,
                     const TraceFn& trace) {
  Harness h = make_harness(shards, arch, cfg);
  const std::size_t n = h.insts.size();
  const std::vector<double>& weights = cfg.uniform_fedavg ? h.uniform_weights : h.agg_weights;

  std::vector<std::size_t> local_steps(n);
  for (std::size_t i = 0; i < n; ++i) {
    local_steps[i] = h.insts[i].stream.batches_per_pass();
    if (local_steps[i] == 0)
      throw ValidationError("fedavg: institution " +
                            std::to_string(h.insts[i].shard->institution_id) +
                            " has fewer samples than one minibatch");
  }

  std::vector<RoundLog> rounds;
  for (int round = 0; round < cfg.max_epochs; ++round) {
    RoundLog log;
    log.round = round;
    log.train_loss.assign(n, 0.0);

    parallel_for(n, cfg.threads, [&](std::size_t i) {
      auto& ctx = h.insts[i];
      std::vector<double> params = nn::flatten_params(ctx.model);
      double loss_sum = 0.0;
      for (std::size_t s = 0; s < local_steps[i]; ++s) {
        Tensor images;
        std::vector<int> labels;
        ctx.stream.next(images, labels);
        auto bw = nn::backward(ctx.model, images, labels, ctx.loss_weights);
        sgd_in_place(params, bw.gradient, cfg.learning_rate);
        set_params(ctx.model, params);
        set_buffers(ctx.model, bw.updated_buffers);
        loss_sum += bw.loss;
      }
      log.train_loss[i] = loss_sum / static_cast<double>(local_steps[i]);
    });

    // Server aggregation, then broadcast.
    std::vector<std::vector<double>> flats(n);
    for (std::size_t i = 0; i < n; ++i) flats[i] = nn::flatten_params(h.insts[i].model);
    std::vector<const std::vector<double>*> ptrs;
    for (const auto& f : flats) ptrs.push_back(&f);
    const std::vector<double> agg_params = weighted_sum(ptrs, weights);

    std::vector<double> agg_buffers;
    if (cfg.mitigations.bn_avg) {
      std::vector<std::vector<double>> bufs(n);
      for (std::size_t i = 0; i < n; ++i) bufs[i] = nn::flatten_buffers(h.insts[i].model);
      std::vector<const std::vector<double>*> bptrs;
      for (const auto& b : bufs) bptrs.push_back(&b);
      agg_buffers = weighted_sum(bptrs, weights);
    }

    for (std::size_t i = 0; i < n; ++i) {
      set_params(h.insts[i].model, agg_params);
      if (cfg.mitigations.bn_avg) set_buffers(h.insts[i].model, agg_buffers);
    }
    log.comm_events = 2LL * static_cast<long long>(n);
    if (trace) trace(round, agg_params);

    nn::ModelState global = h.insts[0].model;  // post-broadcast state
    h.consider(round, global, snapshot_models(h), cfg.mitigations.wl, log);
    rounds.push_back(std::move(log));
  }
  return finish(std::move(h), std::move(rounds), h.insts[0].model);
}

RunOutput run_cwt(const std::vector<skew::InstitutionShard>& shards, const nn::Architecture& arch,
                  const ProtocolConfig& cfg, const TraceFn& trace) {
  if (cfg.mitigations.bn_avg)
    throw ValidationError("cwt: bn_avg is not applicable (no server-side averaging)");
  Harness h = make_harness(shards, arch, cfg);
  const std::size_t n = h.insts.size();

  std::int64_t total = 0;
  for (const auto& c : h.insts) total += c.shard->size();
  std::vector<std::size_t> visit_steps(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.mitigations.wp) {
      visit_steps[i] = h.insts[i].shard->train.size() / static_cast<std::size_t>(cfg.batch_size);
    } else {
      visit_steps[i] = static_cast<std::size_t>(total) /
                       (static_cast<std::size_t>(cfg.batch_size) * n);
    }
    if (visit_steps[i] == 0)
      throw ValidationError("cwt: institution " + std::to_string(h.insts[i].shard->institution_id) +
                            " would train zero iterations per visit");
  }

  nn::ModelState model = h.insts[0].model;  // the traveling model
  std::vector<double> params = nn::flatten_params(model);
  std::vector<RoundLog> rounds;
  long long step = 0;

  for (int cycle = 0; cycle < cfg.max_epochs; ++cycle) {
    RoundLog log;
    log.round = cycle;
    log.train_loss.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& ctx = h.insts[i];
      double loss_sum = 0.0;
      for (std::size_t s = 0; s < visit_steps[i]; ++s) {
        Tensor images;
        std::vector<int> labels;
        ctx.stream.next(images, labels);
        auto bw = nn::backward(model, images, labels, ctx.loss_weights);
        sgd_in_place(params, bw.gradient, cfg.learning_rate);
        set_params(model, params);
        set_buffers(model, bw.updated_buffers);
        loss_sum += bw.loss;
        if (trace) trace(step, params);
        ++step;
      }
      log.train_loss[i] = loss_sum / static_cast<double>(visit_steps[i]);
      ctx.model = model;  // state handed to the next institution
    }
    log.comm_events = static_cast<long long>(n);  // one transfer per hop
    h.consider(cycle, model, snapshot_models(h), cfg.mitigations.wl, log);
    rounds.push_back(std::move(log));
  }
  return finish(std::move(h), std::move(rounds), model);
}

RunOutput run_centralized(const data::LabeledDataset& train, const data::LabeledDataset& val,
                          const nn::Architecture& arch, const ProtocolConfig& cfg,
                          const TraceFn& trace) {
  if (train.size() == 0) throw ValidationError("centralized: empty training dataset");
  std::vector<skew::InstitutionShard> pooled(1);
  pooled[0].institution_id = 0;
  pooled[0].train = train;
  pooled[0].val = val;
  pooled[0].label_histogram = train.label_histogram();

  Harness h = make_harness(pooled, arch, cfg);
  auto& ctx = h.insts[0];
  const std::size_t steps_per_epoch = ctx.stream.batches_per_pass();
  if (steps_per_epoch == 0)
    throw ValidationError("centralized: fewer samples than one minibatch");

  std::vector<double> params = nn::flatten_params(ctx.model);
  std::vector<RoundLog> rounds;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    RoundLog log;
    log.round = epoch;
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      Tensor images;
      std::vector<int> labels;
      ctx.stream.next(images, labels);
      auto bw = nn::backward(ctx.model, images, labels, ctx.loss_weights);
      sgd_in_place(params, bw.gradient, cfg.learning_rate);
      set_params(ctx.model, params);
      set_buffers(ctx.model, bw.updated_buffers);
      loss_sum += bw.loss;
      if (trace) trace(step, params);
      ++step;
    }
    log.train_loss = {loss_sum / static_cast<double>(steps_per_epoch)};
    log.comm_events = 0;
    h.consider(epoch, ctx.model, snapshot_models(h), cfg.mitigations.wl, log);
    rounds.push_back(std::move(log));
  }
  return finish(std::move(h), std::move(rounds), ctx.model);
}

RunOutput run_protocol(const std::vector<skew::InstitutionShard>& shards,
                       const nn::Architecture& arch, const ProtocolConfig& cfg,
                       const TraceFn& trace) {
  switch (cfg.method) {
    case Method::fedsgd:
      return run_fedsgd(shards, arch, cfg, trace);
    case Method::fedavg:
      return run_fedavg(shards, arch, cfg, trace);
    case Method::cwt:
      return run_cwt(shards, arch, cfg, trace);
    case Method::centralized: {
      std::vector<const data::LabeledDataset*> trains, vals;
      for (const auto& s : shards) {
        trains.push_back(&s.train);
        if (s.val.size() > 0) vals.push_back(&s.val);
      }
      if (vals.empty()) throw ValidationError("centralized: no validation data");
      return run_centralized(data::concat(trains), data::concat(vals), arch, cfg, trace);
    }
  }
  throw ValidationError("run_protocol: unknown method");
}

}  // namespace fedsim::fed

#include "fedsim/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedsim/parallel.hpp"
#include "fedsim/rng.hpp"

namespace fedsim::experiment {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ValidationError("unknown key '" + it.key() + "' in " + context);
}

std::pair<int, int> line_column(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

fed::Method method_from_string(const std::string& s) {
  if (s == "fedsgd") return fed::Method::fedsgd;
  if (s == "fedavg") return fed::Method::fedavg;
  if (s == "cwt") return fed::Method::cwt;
  if (s == "centralized") return fed::Method::centralized;
  throw ValidationError("unknown method '" + s + "' (expected fedsgd|fedavg|cwt|centralized)");
}

const char* method_to_string(fed::Method m) {
  switch (m) {
    case fed::Method::fedsgd: return "fedsgd";
    case fed::Method::fedavg: return "fedavg";
    case fed::Method::cwt: return "cwt";
    case fed::Method::centralized: return "centralized";
  }
  return "?";
}

std::string mitigation_string(const fed::Mitigations& m) {
  std::string s;
  if (m.wp) s += "wp";
  if (m.wl) s += s.empty() ? "wl" : "+wl";
  if (m.bn_avg) s += s.empty() ? "bn" : "+bn";
  return s.empty() ? "none" : s;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

nn::Architecture make_arch(const std::string& name, int channels, int height, int width,
                           int categories, int mlp_hidden) {
  if (name == "tiny-conv") return nn::tiny_conv(channels, height, width, categories);
  if (name == "tiny-conv-nobn") return nn::tiny_conv_no_bn(channels, height, width, categories);
  if (name == "mlp") return nn::mlp(channels, height, width, mlp_hidden, categories, false);
  if (name == "mlp-bn") return nn::mlp(channels, height, width, mlp_hidden, categories, true);
  throw ValidationError("unknown architecture '" + name +
                        "' (expected tiny-conv|tiny-conv-nobn|mlp|mlp-bn)");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_column(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ValidationError("config parse error at line " + std::to_string(line) + ", column " +
                          std::to_string(col) + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  check_keys(j,
             {"seed", "repeats", "threads", "collect_cross_matrix", "arch", "mlp_hidden",
              "output_dir", "dataset", "partitions", "protocols", "reference"},
             "experiment config");

  ExperimentConfig cfg;
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.repeats = j.value("repeats", 4);
  if (cfg.repeats < 1) throw ValidationError("config: 'repeats' must be >= 1");
  cfg.threads = j.value("threads", 1);
  if (cfg.threads < 1) throw ValidationError("config: 'threads' must be >= 1");
  cfg.collect_cross_matrix = j.value("collect_cross_matrix", false);
  cfg.arch = j.value("arch", std::string("tiny-conv"));
  cfg.mlp_hidden = j.value("mlp_hidden", 32);
  cfg.output_dir = j.value("output_dir", std::string("results"));

  if (!j.contains("dataset")) throw ValidationError("config: missing 'dataset'");
  const json& dj = j.at("dataset");
  check_keys(dj, {"synth", "idx", "fractions"}, "dataset");
  if (dj.contains("synth") == dj.contains("idx"))
    throw ValidationError("config: dataset needs exactly one of 'synth' or 'idx'");
  if (dj.contains("synth")) {
    const json& sj = dj.at("synth");
    check_keys(sj, {"num_categories", "per_category", "height", "width", "seed"}, "dataset.synth");
    cfg.dataset.use_synth = true;
    cfg.dataset.synth.num_categories = sj.value("num_categories", 4);
    cfg.dataset.synth.height = sj.value("height", 16);
    cfg.dataset.synth.width = sj.value("width", 16);
    cfg.dataset.synth.seed = sj.value("seed", std::uint64_t{0});
    if (!sj.contains("per_category"))
      throw ValidationError("config: dataset.synth needs 'per_category'");
    if (sj.at("per_category").is_array()) {
      for (const auto& v : sj.at("per_category"))
        cfg.dataset.synth.per_category.push_back(v.get<std::int64_t>());
    } else {
      cfg.dataset.synth.per_category.assign(
          static_cast<std::size_t>(cfg.dataset.synth.num_categories),
          sj.at("per_category").get<std::int64_t>());
    }
    if (!dj.contains("fractions"))
      throw ValidationError("config: synth dataset needs 'fractions'");
    const json& fj = dj.at("fractions");
    check_keys(fj, {"train", "val", "test"}, "dataset.fractions");
    cfg.dataset.fractions.train = fj.value("train", 0.5);
    cfg.dataset.fractions.val = fj.value("val", 0.25);
    cfg.dataset.fractions.test = fj.value("test", 0.25);
  } else {
    const json& ij = dj.at("idx");
    check_keys(ij, {"dir"}, "dataset.idx");
    cfg.dataset.use_synth = false;
    if (!ij.contains("dir")) throw ValidationError("config: dataset.idx needs 'dir'");
    cfg.dataset.idx_dir = ij.at("dir").get<std::string>();
  }

  if (!j.contains("partitions") || !j.at("partitions").is_array() || j.at("partitions").empty())
    throw ValidationError("config: needs a non-empty 'partitions' array");
  std::set<std::string> part_ids;
  for (const auto& pj : j.at("partitions")) {
    PartitionSpec spec;
    if (!pj.is_object() || !pj.contains("id"))
      throw ValidationError("config: every partition needs an 'id'");
    spec.id = pj.at("id").get<std::string>();
    if (!part_ids.insert(spec.id).second)
      throw ValidationError("config: duplicate partition id '" + spec.id + "'");
    spec.plan = skew::plan_from_json(pj);
    cfg.partitions.push_back(std::move(spec));
  }

  if (!j.contains("protocols") || !j.at("protocols").is_array() || j.at("protocols").empty())
    throw ValidationError("config: needs a non-empty 'protocols' array");
  std::set<std::string> proto_ids;
  for (const auto& pj : j.at("protocols")) {
    check_keys(pj, {"id", "method", "wp", "wl", "bn_avg", "batch", "lr", "epochs", "uniform_fedavg"},
               "protocol '" + pj.value("id", std::string("?")) + "'");
    ProtocolSpec spec;
    if (!pj.contains("id")) throw ValidationError("config: every protocol needs an 'id'");
    spec.id = pj.at("id").get<std::string>();
    if (!proto_ids.insert(spec.id).second)
      throw ValidationError("config: duplicate protocol id '" + spec.id + "'");
    if (!pj.contains("method")) throw ValidationError("config: protocol '" + spec.id + "' needs 'method'");
    spec.method = method_from_string(pj.at("method").get<std::string>());
    spec.mitigations.wp = pj.value("wp", false);
    spec.mitigations.wl = pj.value("wl", false);
    spec.mitigations.bn_avg = pj.value("bn_avg", false);
    spec.batch_size = pj.value("batch", 32);
    spec.learning_rate = pj.value("lr", 0.05);
    spec.epochs = pj.value("epochs", 10);
    spec.uniform_fedavg = pj.value("uniform_fedavg", false);
    if (spec.batch_size < 2)
      throw ValidationError("config: protocol '" + spec.id + "' batch must be >= 2");
    if (spec.learning_rate <= 0.0)
      throw ValidationError("config: protocol '" + spec.id + "' lr must be > 0");
    if (spec.epochs < 0)
      throw ValidationError("config: protocol '" + spec.id + "' epochs must be >= 0");
    if (spec.mitigations.bn_avg &&
        (spec.method == fed::Method::cwt || spec.method == fed::Method::centralized))
      throw ValidationError("config: protocol '" + spec.id + "': bn_avg requires fedsgd or fedavg");
    cfg.protocols.push_back(std::move(spec));
  }

  if (j.contains("reference")) {
    const json& rj = j.at("reference");
    check_keys(rj, {"partition", "protocol"}, "reference");
    cfg.reference.partition = rj.value("partition", std::string());
    cfg.reference.protocol = rj.value("protocol", std::string());
    if (!cfg.reference.partition.empty() && !part_ids.count(cfg.reference.partition))
      throw ValidationError("config: reference partition '" + cfg.reference.partition +
                            "' is not defined");
    if (!cfg.reference.protocol.empty() && !proto_ids.count(cfg.reference.protocol))
      throw ValidationError("config: reference protocol '" + cfg.reference.protocol +
                            "' is not defined");
  }
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["repeats"] = cfg.repeats;
  j["threads"] = cfg.threads;
  j["collect_cross_matrix"] = cfg.collect_cross_matrix;
  j["arch"] = cfg.arch;
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["output_dir"] = cfg.output_dir;
  json dj;
  if (cfg.dataset.use_synth) {
    json sj;
    sj["num_categories"] = cfg.dataset.synth.num_categories;
    sj["per_category"] = cfg.dataset.synth.per_category;
    sj["height"] = cfg.dataset.synth.height;
    sj["width"] = cfg.dataset.synth.width;
    sj["seed"] = cfg.dataset.synth.seed;
    dj["synth"] = std::move(sj);
    json fj;
    fj["train"] = cfg.dataset.fractions.train;
    fj["val"] = cfg.dataset.fractions.val;
    fj["test"] = cfg.dataset.fractions.test;
    dj["fractions"] = std::move(fj);
  } else {
    dj["idx"] = json{{"dir", cfg.dataset.idx_dir}};
  }
  j["dataset"] = std::move(dj);
  json parts = json::array();
  for (const auto& p : cfg.partitions) {
    json pj = skew::plan_to_json(p.plan);
    pj["id"] = p.id;
    parts.push_back(std::move(pj));
  }
  j["partitions"] = std::move(parts);
  json protos = json::array();
  for (const auto& p : cfg.protocols) {
    json pj;
    pj["id"] = p.id;
    pj["method"] = method_to_string(p.method);
    pj["wp"] = p.mitigations.wp;
    pj["wl"] = p.mitigations.wl;
    pj["bn_avg"] = p.mitigations.bn_avg;
    pj["batch"] = p.batch_size;
    pj["lr"] = p.learning_rate;
    pj["epochs"] = p.epochs;
    pj["uniform_fedavg"] = p.uniform_fedavg;
    protos.push_back(std::move(pj));
  }
  j["protocols"] = std::move(protos);
  if (!cfg.reference.empty()) {
    json rj;
    if (!cfg.reference.partition.empty()) rj["partition"] = cfg.reference.partition;
    if (!cfg.reference.protocol.empty()) rj["protocol"] = cfg.reference.protocol;
    j["reference"] = std::move(rj);
  }
  return j;
}

namespace {

struct LoadedData {
  data::LabeledDataset train, val, test;
};

LoadedData load_dataset(const ExperimentConfig& cfg) {
  LoadedData d;
  if (cfg.dataset.use_synth) {
    const data::LabeledDataset full = data::synth_generate(cfg.dataset.synth);
    auto split = data::stratified_split(full, cfg.dataset.fractions,
                                        rng::derive(cfg.seed, {0x73706c69ull}));
    d.train = std::move(split.train);
    d.val = std::move(split.val);
    d.test = std::move(split.test);
  } else {
    const std::filesystem::path dir(cfg.dataset.idx_dir);
    d.train = data::load_idx((dir / "train-images.idx").string(), (dir / "train-labels.idx").string());
    d.val = data::load_idx((dir / "val-images.idx").string(), (dir / "val-labels.idx").string());
    d.test = data::load_idx((dir / "test-images.idx").string(), (dir / "test-labels.idx").string());
    const int c = std::max({d.train.num_categories, d.val.num_categories, d.test.num_categories});
    d.train.num_categories = d.val.num_categories = d.test.num_categories = c;
  }
  return d;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  const LoadedData dset = load_dataset(cfg);
  const auto arch = make_arch(cfg.arch, static_cast<int>(dset.train.channels()),
                              static_cast<int>(dset.train.height()),
                              static_cast<int>(dset.train.width()), dset.train.num_categories,
                              cfg.mlp_hidden);

  const std::size_t np = cfg.partitions.size();
  const std::size_t nr = cfg.protocols.size();
  const std::size_t rt = static_cast<std::size_t>(cfg.repeats);

  // Derive all seeds up front and verify distinctness.
  struct TaskSeeds {
    std::uint64_t partition, model, order, trial;
  };
  std::vector<TaskSeeds> seeds(np * nr * rt);
  {
    std::set<std::uint64_t> all;
    auto reg = [&](std::uint64_t s) {
      if (!all.insert(s).second)
        throw ValidationError("experiment: derived seed collision; change the base seed");
      return s;
    };
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t r = 0; r < nr; ++r)
        for (std::size_t t = 0; t < rt; ++t) {
          auto& ts = seeds[(p * nr + r) * rt + t];
          ts.partition = rng::derive(cfg.seed, {2, p, t});
          ts.model = rng::derive(cfg.seed, {3, t});
          ts.order = reg(rng::derive(cfg.seed, {4, p, r, t}));
          ts.trial = reg(rng::derive(cfg.seed, {5, p, r, t}));
        }
    // partition/model seeds are intentionally shared across protocols (same
    // shards and same initialization within a trial), so they are checked for
    // distinctness only among themselves.
    std::set<std::uint64_t> partition_seeds, model_seeds;
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t t = 0; t < rt; ++t)
        if (!partition_seeds.insert(rng::derive(cfg.seed, {2, p, t})).second)
          throw ValidationError("experiment: partition seed collision; change the base seed");
    for (std::size_t t = 0; t < rt; ++t) model_seeds.insert(rng::derive(cfg.seed, {3, t}));
  }

  struct TaskResult {
    TrialOutcome outcome;
    std::vector<std::vector<double>> matrix;
    std::string error;
  };
  std::vector<TaskResult> results(np * nr * rt);

  parallel_for(np * nr * rt, cfg.threads, [&](std::size_t task) {
    const std::size_t p = task / (nr * rt);
    const std::size_t r = (task / rt) % nr;
    const std::size_t t = task % rt;
    TaskResult& out = results[task];
    out.outcome.trial = static_cast<int>(t);
    out.outcome.seed = seeds[task].trial;
    try {
      skew::PartitionPlan plan = cfg.partitions[p].plan;
      plan.seed = seeds[task].partition;
      const auto part = skew::apply_plan(plan, dset.train, dset.val, dset.test);
      const auto skew_report = skew::score_partition(part.shards);
      out.outcome.ks = skew_report.mean_pairwise_ks;
      out.outcome.quantity_std = skew_report.quantity_std;

      const ProtocolSpec& proto = cfg.protocols[r];
      fed::ProtocolConfig pc;
      pc.method = proto.method;
      pc.mitigations = proto.mitigations;
      pc.batch_size = proto.batch_size;
      pc.learning_rate = proto.learning_rate;
      pc.max_epochs = proto.epochs;
      pc.model_seed = seeds[task].model;
      pc.data_order_seed = seeds[task].order;
      pc.uniform_fedavg = proto.uniform_fedavg;
      pc.threads = 1;  // tasks are the unit of parallelism

      const auto run = fed::run_protocol(part.shards, arch, pc);
      out.outcome.test_accuracy = eval::accuracy(run.selected, dset.test);
      out.outcome.selected_round = run.selected_round;
      if (cfg.collect_cross_matrix && t == 0 && proto.method != fed::Method::centralized)
        out.matrix = eval::cross_institution_matrix(run.institution_models, part.test_shards);
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });

  ExperimentReport report;
  report.config = config_to_json(cfg);

  // Partition summaries under the trial-0 realization.
  for (std::size_t p = 0; p < np; ++p) {
    PartitionSummary s;
    s.id = cfg.partitions[p].id;
    skew::PartitionPlan plan = cfg.partitions[p].plan;
    plan.seed = rng::derive(cfg.seed, {2, p, 0});
    try {
      const auto part = skew::apply_plan(plan, dset.train, dset.val, dset.test);
      s.skew = skew::score_partition(part.shards);
    } catch (const std::exception&) {
      // cell errors carry the details
    }
    report.partitions.push_back(std::move(s));
  }

  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t r = 0; r < nr; ++r) {
      CellOutcome cell;
      cell.partition_id = cfg.partitions[p].id;
      cell.protocol_id = cfg.protocols[r].id;
      cell.mitigations = mitigation_string(cfg.protocols[r].mitigations);
      for (std::size_t t = 0; t < rt; ++t) {
        const TaskResult& tr = results[(p * nr + r) * rt + t];
        if (!tr.error.empty()) {
          cell.error = tr.error;
          break;
        }
        cell.trials.push_back(tr.outcome);
        if (!tr.matrix.empty()) cell.cross_matrix = tr.matrix;
      }
      if (cell.error.empty()) {
        double sum = 0.0;
        for (const auto& t : cell.trials) sum += t.test_accuracy;
        cell.mean_accuracy = sum / static_cast<double>(cell.trials.size());
        if (cell.trials.size() > 1) {
          double ss = 0.0;
          for (const auto& t : cell.trials) {
            const double d = t.test_accuracy - cell.mean_accuracy;
            ss += d * d;
          }
          cell.std_accuracy = std::sqrt(ss / static_cast<double>(cell.trials.size() - 1));
        }
      } else {
        cell.trials.clear();
      }
      report.cells.push_back(std::move(cell));
    }

  // Drop rates against the declared reference.
  if (!cfg.reference.empty()) {
    auto find_cell = [&](const std::string& part, const std::string& proto) -> const CellOutcome* {
      for (const auto& c : report.cells)
        if (c.partition_id == part && c.protocol_id == proto) return &c;
      return nullptr;
    };
    for (auto& cell : report.cells) {
      if (!cell.error.empty()) continue;
      const std::string ref_part =
          cfg.reference.partition.empty() ? cell.partition_id : cfg.reference.partition;
      const std::string ref_proto =
          cfg.reference.protocol.empty() ? cell.protocol_id : cfg.reference.protocol;
      const CellOutcome* ref = find_cell(ref_part, ref_proto);
      if (ref && ref->error.empty() && ref->mean_accuracy > 0.0) {
        cell.has_drop = true;
        cell.drop_rate = eval::drop_rate(cell.mean_accuracy, ref->mean_accuracy);
      }
    }
  }
  return report;
}

json report_to_json(const ExperimentReport& report) {
  json j;
  j["schema"] = "fedsim.results.v1";
  j["config"] = report.config;
  json parts = json::array();
  for (const auto& p : report.partitions) {
    json pj;
    pj["id"] = p.id;
    pj["quantity_std"] = p.skew.quantity_std;
    pj["mean_pairwise_ks"] = p.skew.mean_pairwise_ks;
    pj["sizes"] = p.skew.sizes;
    pj["label_histograms"] = p.skew.label_histograms;
    parts.push_back(std::move(pj));
  }
  j["partitions"] = std::move(parts);
  json cells = json::array();
  for (const auto& c : report.cells) {
    json cj;
    cj["partition"] = c.partition_id;
    cj["protocol"] = c.protocol_id;
    cj["mitigations"] = c.mitigations;
    if (!c.error.empty()) {
      cj["error"] = c.error;
    } else {
      json trials = json::array();
      for (const auto& t : c.trials) {
        json tj;
        tj["trial"] = t.trial;
        tj["seed"] = t.seed;
        tj["test_accuracy"] = t.test_accuracy;
        tj["selected_round"] = t.selected_round;
        tj["ks"] = t.ks;
        tj["quantity_std"] = t.quantity_std;
        trials.push_back(std::move(tj));
      }
      cj["trials"] = std::move(trials);
      cj["mean_accuracy"] = c.mean_accuracy;
      cj["std_accuracy"] = c.std_accuracy;
      cj["drop_rate"] = c.has_drop ? json(c.drop_rate) : json(nullptr);
      if (!c.cross_matrix.empty()) cj["cross_matrix"] = c.cross_matrix;
    }
    cells.push_back(std::move(cj));
  }
  j["cells"] = std::move(cells);
  return j;
}

std::string render_csv(const json& results) {
  std::string out =
      "partition_id,protocol,mitigations,trial,seed,test_accuracy,drop_rate,ks,quantity_std\n";
  for (const auto& c : results.at("cells")) {
    if (c.contains("error")) continue;
    const std::string prefix = c.at("partition").get<std::string>() + "," +
                               c.at("protocol").get<std::string>() + "," +
                               c.at("mitigations").get<std::string>() + ",";
    const bool has_drop = !c.at("drop_rate").is_null();
    const std::string drop = has_drop ? fmt("%.6f", c.at("drop_rate").get<double>()) : "";
    for (const auto& t : c.at("trials")) {
      out += prefix;
      out += std::to_string(t.at("trial").get<int>()) + ",";
      out += std::to_string(t.at("seed").get<std::uint64_t>()) + ",";
      out += fmt("%.9f", t.at("test_accuracy").get<double>()) + ",";
      out += drop + ",";
      out += fmt("%.6f", t.at("ks").get<double>()) + ",";
      out += fmt("%.6f", t.at("quantity_std").get<double>()) + "\n";
    }
  }
  return out;
}

std::string render_cross_matrix_csv(const json& results) {
  std::string out = "partition_id,protocol,model_institution,test_institution,accuracy\n";
  for (const auto& c : results.at("cells")) {
    if (c.contains("error") || !c.contains("cross_matrix")) continue;
    const auto& m = c.at("cross_matrix");
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < m[i].size(); ++j) {
        out += c.at("partition").get<std::string>() + "," + c.at("protocol").get<std::string>() +
               "," + std::to_string(i) + "," + std::to_string(j) + "," +
               fmt("%.9f", m[i][j].get<double>()) + "\n";
      }
  }
  return out;
}

namespace {

const char* kPalette[] = {"#4878a8", "#e49444", "#5aa469", "#c65a5a",
                          "#8577b3", "#b0823f", "#6aa1c8", "#999999"};

}  // namespace

std::string render_svg(const json& results) {
  // Grouped bars: one group per partition, one bar per protocol, std
  // whiskers, drop-rate annotation when the drop exceeds 1%.
  std::vector<std::string> partitions, protocols;
  for (const auto& c : results.at("cells")) {
    const std::string p = c.at("partition").get<std::string>();
    const std::string r = c.at("protocol").get<std::string>();
    if (std::find(partitions.begin(), partitions.end(), p) == partitions.end())
      partitions.push_back(p);
    if (std::find(protocols.begin(), protocols.end(), r) == protocols.end()) protocols.push_back(r);
  }

  const double bar_w = 22.0, bar_gap = 4.0, group_gap = 34.0;
  const double left = 64.0, top = 56.0, plot_h = 300.0;
  const double group_w = protocols.size() * (bar_w + bar_gap) - bar_gap;
  const double width = left + partitions.size() * (group_w + group_gap) + 24.0;
  const double height = top + plot_h + 56.0;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%.0f", width) + "\" height=\"" +
       fmt("%.0f", height) + "\" viewBox=\"0 0 " + fmt("%.0f", width) + " " + fmt("%.0f", height) +
       "\">\n";
  s += "<style>text{font-family:monospace;font-size:11px;}</style>\n";
  s += "<text x=\"" + fmt("%.1f", left) + "\" y=\"16\">test accuracy (mean of trials, whiskers = std; "
       "labels = drop rate beyond 1%)</text>\n";

  // legend
  double lx = left;
  for (std::size_t r = 0; r < protocols.size(); ++r) {
    s += "<rect x=\"" + fmt("%.1f", lx) + "\" y=\"26\" width=\"10\" height=\"10\" fill=\"" +
         kPalette[r % 8] + "\"/>\n";
    s += "<text x=\"" + fmt("%.1f", lx + 14.0) + "\" y=\"35\">" + protocols[r] + "</text>\n";
    lx += 14.0 + 7.0 * protocols[r].size() + 18.0;
  }

  // axis + gridlines
  for (int g = 0; g <= 5; ++g) {
    const double v = g / 5.0;
    const double y = top + plot_h - v * plot_h;
    s += "<line x1=\"" + fmt("%.1f", left - 6.0) + "\" y1=\"" + fmt("%.1f", y) + "\" x2=\"" +
         fmt("%.1f", width - 16.0) + "\" y2=\"" + fmt("%.1f", y) + "\" stroke=\"#dddddd\"/>\n";
    s += "<text x=\"" + fmt("%.1f", left - 40.0) + "\" y=\"" + fmt("%.1f", y + 4.0) + "\">" +
         fmt("%.1f", v) + "</text>\n";
  }

  auto find_cell = [&](const std::string& p, const std::string& r) -> const json* {
    for (const auto& c : results.at("cells"))
      if (c.at("partition") == p && c.at("protocol") == r) return &c;
    return nullptr;
  };

  for (std::size_t g = 0; g < partitions.size(); ++g) {
    const double gx = left + g * (group_w + group_gap);
    s += "<text x=\"" + fmt("%.1f", gx) + "\" y=\"" + fmt("%.1f", top + plot_h + 18.0) + "\">" +
         partitions[g] + "</text>\n";
    for (std::size_t r = 0; r < protocols.size(); ++r) {
      const json* c = find_cell(partitions[g], protocols[r]);
      if (!c) continue;
      const double x = gx + r * (bar_w + bar_gap);
      if (c->contains("error")) {
        s += "<text x=\"" + fmt("%.1f", x) + "\" y=\"" + fmt("%.1f", top + plot_h - 4.0) +
             "\">err</text>\n";
        continue;
      }
      const double mean = c->at("mean_accuracy").get<double>();
      const double sd = c->at("std_accuracy").get<double>();
      const double h = mean * plot_h;
      s += "<rect x=\"" + fmt("%.1f", x) + "\" y=\"" + fmt("%.1f", top + plot_h - h) +
           "\" width=\"" + fmt("%.1f", bar_w) + "\" height=\"" + fmt("%.1f", h) + "\" fill=\"" +
           kPalette[r % 8] + "\"/>\n";
      const double cx = x + bar_w / 2.0;
      const double y_lo = top + plot_h - std::clamp(mean - sd, 0.0, 1.0) * plot_h;
      const double y_hi = top + plot_h - std::clamp(mean + sd, 0.0, 1.0) * plot_h;
      s += "<line x1=\"" + fmt("%.1f", cx) + "\" y1=\"" + fmt("%.1f", y_lo) + "\" x2=\"" +
           fmt("%.1f", cx) + "\" y2=\"" + fmt("%.1f", y_hi) + "\" stroke=\"#333333\"/>\n";
      if (!c->at("drop_rate").is_null()) {
        const double drop = c->at("drop_rate").get<double>();
        if (drop > 1.0) {
          s += "<text x=\"" + fmt("%.1f", x - 2.0) + "\" y=\"" + fmt("%.1f", y_hi - 6.0) +
               "\" fill=\"#aa2222\">-" + fmt("%.1f", drop) + "%</text>\n";
        }
      }
    }
  }
  s += "</svg>\n";
  return s;
}

void emit_report(const ExperimentReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory: " + dir);

  const json results = report_to_json(report);
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(fs::path(dir) / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + name + " under " + dir);
    out << content;
  };
  write("results.json", results.dump(2) + "\n");
  write("results.csv", render_csv(results));
  write("accuracy.svg", render_svg(results));
  bool any_matrix = false;
  for (const auto& c : results.at("cells"))
    if (c.contains("cross_matrix")) any_matrix = true;
  if (any_matrix) write("cross_matrix.csv", render_cross_matrix_csv(results));
}

void render_report_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path path = fs::path(dir) / "results.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("no results.json under " + dir);
  json results;
  try {
    results = json::parse(std::string(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>()));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("results.json is not valid JSON: ") + e.what());
  }
  if (!results.is_object() || results.value("schema", "") != "fedsim.results.v1")
    throw ValidationError("results.json: missing or unknown schema marker");
  if (!results.contains("cells") || !results.at("cells").is_array())
    throw ValidationError("results.json: missing 'cells'");

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(fs::path(dir) / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + name + " under " + dir);
    out << content;
  };
  write("results.csv", render_csv(results));
  write("accuracy.svg", render_svg(results));
  bool any_matrix = false;
  for (const auto& c : results.at("cells"))
    if (c.contains("cross_matrix")) any_matrix = true;
  if (any_matrix) write("cross_matrix.csv", render_cross_matrix_csv(results));
}

}  // namespace fedsim::experiment

// Command-line front end: gen, train, eval, ablate, gradcheck, flops,
// reorder-inspect.

#include "semamil/alloc.hpp"
#include "semamil/bagdata.hpp"
#include "semamil/config.hpp"
#include "semamil/error.hpp"
#include "semamil/harness.hpp"
#include "semamil/model.hpp"
#include "semamil/reorder.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semamil;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheck = 1;
constexpr int kExitIo = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_out) {
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--set", c.overrides, "Dotted override, e.g. model.d=16 (repeatable)");
  cmd->add_option("--seed", c.seed, "Overrides the command's seed");
  if (with_out) {
    cmd->add_option("--out", c.out, "Output directory")->required();
    cmd->add_flag("--force", c.force, "Allow writing into a non-empty directory");
  }
}

config::RunConfig resolve(const Common& c) {
  config::RunConfig rc;
  if (!c.config_path.empty()) rc = config::load_run_config(c.config_path);
  rc = config::apply_overrides(rc, c.overrides);
  return rc;
}

void prepare_out(const Common& c) {
  const fs::path out(c.out);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw IoError("output path '" + c.out + "' is not a directory");
    if (!fs::is_empty(out) && !c.force) {
      throw IoError("output directory '" + c.out + "' is not empty (use --force)");
    }
  }
  fs::create_directories(out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

bagdata::Dataset load_data(const std::string& data, const model::ModelConfig& m) {
  const fs::path p(data);
  const fs::path manifest = fs::is_directory(p) ? p / "manifest.json" : p;
  if (!fs::exists(manifest)) throw IoError("manifest not found: '" + manifest.string() + "'");
  bagdata::Dataset ds = bagdata::read_dataset(manifest);
  if (!ds.bags.empty() && ds.bags.front().X.cols() != m.D_in) {
    throw ValidationError("dataset embedding width " + std::to_string(ds.bags.front().X.cols()) +
                          " does not match model.D_in " + std::to_string(m.D_in));
  }
  if (ds.n_classes != m.n_classes) {
    throw ValidationError("dataset has " + std::to_string(ds.n_classes) +
                          " classes but model.n_classes is " + std::to_string(m.n_classes));
  }
  return ds;
}

json plan_to_json(const bagdata::SplitPlan& plan) {
  json folds = json::array();
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    folds.push_back({{"fold", f},
                     {"seed", plan.fold_seeds[f]},
                     {"train", plan.folds[f].train},
                     {"val", plan.folds[f].val},
                     {"test", plan.folds[f].test}});
  }
  return json{{"ratios", {plan.train_ratio, plan.val_ratio, plan.test_ratio}}, {"folds", folds}};
}

std::string fold_name(int f) {
  std::ostringstream os;
  os << "fold_" << std::setw(2) << std::setfill('0') << f << ".semm";
  return os.str();
}

void print_summary(const harness::Metrics& m) {
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& f : m.per_fold) {
    if (f.ok) {
      std::cout << "fold " << f.fold << "  auc " << f.auc << "  acc " << f.acc
                << "  best_epoch " << f.best_epoch << "\n";
    } else {
      std::cout << "fold " << f.fold << "  FAILED: " << f.error << "\n";
    }
  }
  std::cout << "AUC " << m.auc_mean << " +/- " << m.auc_std << "   ACC " << m.acc_mean
            << " +/- " << m.acc_std << "  (" << m.n_ok() << "/" << m.per_fold.size()
            << " folds)\n";
}

// ---------------------------------------------------------------------------

int cmd_gen(const Common& c) {
  config::RunConfig rc = resolve(c);
  if (c.seed) rc.data.seed = *c.seed;
  rc.data.validate();
  prepare_out(c);
  const bagdata::Dataset ds = bagdata::generate_synthetic(rc.data);
  bagdata::write_dataset(ds, c.out);
  std::vector<int> hist(static_cast<std::size_t>(ds.n_classes), 0);
  for (const auto& b : ds.bags) ++hist[static_cast<std::size_t>(b.label)];
  std::cout << "wrote " << ds.bags.size() << " bags to " << c.out << "\n";
  for (std::size_t k = 0; k < hist.size(); ++k) {
    std::cout << "class " << k << ": " << hist[k] << "\n";
  }
  return kExitOk;
}

struct TrainArgs {
  std::string data;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  config::RunConfig rc = resolve(c);
  if (c.seed) rc.train.seed = *c.seed;
  rc.model.validate();
  rc.train.validate();
  const bagdata::Dataset ds = load_data(a.data, rc.model);
  prepare_out(c);
  const fs::path out(c.out);
  fs::create_directories(out / "checkpoints");

  const bagdata::SplitPlan plan = bagdata::split_monte_carlo(ds, rc.train.n_folds, rc.train.split_seed);
  write_text(out / "splits.json", plan_to_json(plan).dump(2) + "\n");
  write_text(out / "config.json", config::to_json(rc).dump(2) + "\n");

  const std::vector<model::BagTensor> bags = model::to_tensors(ds);
  harness::ProtocolOptions opts;
  opts.jobs = c.jobs;
  opts.on_fold_model = [&](int f, const model::Model& m) {
    model::save_checkpoint(m, out / "checkpoints" / fold_name(f));
  };
  const harness::Metrics m = harness::run_protocol(bags, rc.model, rc.train, plan, opts);
  write_text(out / "metrics.json", harness::metrics_to_json(m).dump(2) + "\n");
  write_text(out / "metrics.csv", harness::metrics_to_csv(m));
  print_summary(m);
  return m.n_ok() == m.per_fold.size() ? kExitOk : kExitCheck;
}

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string splits;
  std::optional<int> fold;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint not found: '" + a.checkpoint + "'");
  const model::Model m = model::load_checkpoint(a.checkpoint);
  const bagdata::Dataset ds = load_data(a.data, m.config());
  std::vector<model::BagTensor> bags = model::to_tensors(ds);
  if (a.fold) {
    if (a.splits.empty()) throw ValidationError("--fold requires --splits");
    std::ifstream in(a.splits);
    if (!in) throw IoError("cannot open splits '" + a.splits + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw IoError("splits '" + a.splits + "' is not valid JSON: " + e.what());
    }
    const auto& folds = j.at("folds");
    if (*a.fold < 0 || static_cast<std::size_t>(*a.fold) >= folds.size()) {
      throw ValidationError("--fold out of range");
    }
    const auto ids = folds.at(static_cast<std::size_t>(*a.fold)).at("test").get<std::vector<std::string>>();
    std::vector<model::BagTensor> subset;
    for (std::size_t i : harness::indices_of(bags, ids)) subset.push_back(bags[i]);
    bags = std::move(subset);
  }
  const harness::EvalResult r = harness::evaluate(m, bags);
  const json result{{"n_bags", bags.size()},
                    {"auc", std::isfinite(r.auc) ? json(r.auc) : json(nullptr)},
                    {"acc", r.acc}};
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "eval.json", result.dump(2) + "\n");
  }
  std::cout << result.dump() << "\n";
  return kExitOk;
}

int cmd_ablate(const Common& c, const TrainArgs& a) {
  config::RunConfig rc = resolve(c);
  if (c.seed) rc.train.seed = *c.seed;
  rc.model.validate();
  rc.train.validate();
  const bagdata::Dataset ds = load_data(a.data, rc.model);
  prepare_out(c);
  const bagdata::SplitPlan plan = bagdata::split_monte_carlo(ds, rc.train.n_folds, rc.train.split_seed);
  const std::vector<model::BagTensor> bags = model::to_tensors(ds);
  harness::ProtocolOptions opts;
  opts.jobs = c.jobs;
  const auto rows = harness::run_ablation(bags, rc.model, rc.train, plan, opts);
  const std::string csv = harness::ablation_to_csv(rows);
  write_text(fs::path(c.out) / "ablation.csv", csv);
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back({{"sr", r.sr}, {"srsm", r.srsm}, {"metrics", harness::metrics_to_json(r.metrics)}});
  }
  write_text(fs::path(c.out) / "ablation.json", j.dump(2) + "\n");
  std::cout << csv;
  return kExitOk;
}

const std::map<std::string, ad::OpKind>& fault_kinds() {
  static const std::map<std::string, ad::OpKind> kinds{
      {"matmul", ad::OpKind::MatMul},       {"gelu", ad::OpKind::Gelu},
      {"softmax", ad::OpKind::RowSoftmax},  {"layernorm", ad::OpKind::LayerNorm},
      {"scan", ad::OpKind::Scan},           {"zoh", ad::OpKind::ZohBd},
      {"sigmoid", ad::OpKind::Sigmoid},     {"softplus", ad::OpKind::Softplus},
  };
  return kinds;
}

int cmd_gradcheck(const Common& c, const std::string& fault) {
  model::ModelConfig mc = harness::tiny_gradcheck_config();
  if (!c.config_path.empty() || !c.overrides.empty()) {
    config::RunConfig rc;
    rc.model = mc;
    if (!c.config_path.empty()) rc = config::load_run_config(c.config_path);
    mc = config::apply_overrides(rc, c.overrides).model;
  }
  std::optional<ad::OpKind> kind;
  if (!fault.empty()) kind = fault_kinds().at(fault);
  const harness::GradcheckReport rep = harness::gradcheck_model(mc, c.seed.value_or(1), 1e-3, kind);
  std::cout << std::left << std::setw(28) << "tensor" << std::right << std::setw(8) << "size"
            << std::setw(14) << "max|grad|" << std::setw(14) << "max rel err" << "\n";
  for (const auto& t : rep.tensors) {
    std::cout << std::left << std::setw(28) << t.name << std::right << std::setw(8) << t.size
              << std::scientific << std::setprecision(3) << std::setw(14) << t.max_abs_grad
              << std::setw(14) << t.max_rel_err << (t.max_rel_err < rep.tolerance ? "" : "  FAIL")
              << "\n";
  }
  std::cout << (rep.passed() ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance "
            << rep.tolerance << ", seed " << rep.seed_used << ")\n";
  return rep.passed() ? kExitOk : kExitCheck;
}

int cmd_flops(const Common& c, std::int64_t L) {
  const config::RunConfig rc = resolve(c);
  rc.model.validate();
  const auto p = model::param_breakdown(rc.model);
  const auto f = model::flop_breakdown(rc.model, L);
  const auto row = [](const char* name, std::int64_t v) {
    std::cout << std::left << std::setw(14) << name << std::right << std::setw(16) << v << "\n";
  };
  std::cout << "params\n";
  row("projection", p.projection);
  row("router", p.router);
  row("blocks", p.blocks);
  row("pooling", p.pooling);
  row("head", p.head);
  row("total", p.total());
  std::cout << "flops (L=" << L << ", MAC = 2 FLOPs)\n";
  row("projection", f.projection);
  row("router", f.router);
  row("blocks", f.blocks);
  row("pooling", f.pooling);
  row("head", f.head);
  row("total", f.total());
  std::cout << std::fixed << std::setprecision(3) << "Params(M) "
            << static_cast<double>(p.total()) / 1e6 << "  FLOPs(G) "
            << static_cast<double>(f.total()) / 1e9 << "\n";
  return kExitOk;
}

int cmd_reorder_inspect(const Common& c, const std::string& bag_path, const std::string& checkpoint) {
  model::Model m;
  if (!checkpoint.empty()) {
    m = model::load_checkpoint(checkpoint);
  } else {
    config::RunConfig rc = resolve(c);
    if (c.seed) rc.train.seed = *c.seed;
    m = model::Model::create(rc.model, rc.train.seed);
  }
  if (!m.config().has_router()) throw ValidationError("model has no router (sr disabled or baseline)");
  const bagdata::Bag bag = bagdata::load_bag(bag_path);
  if (bag.X.cols() != m.config().D_in) {
    throw ValidationError("bag width " + std::to_string(bag.X.cols()) +
                          " does not match model.D_in " + std::to_string(m.config().D_in));
  }
  model::ForwardTrace trace;
  m.logits(model::to_tensor(bag), &trace);
  const auto& p = trace.perm;
  for (std::size_t j = 0; j < p.pi.size(); ++j) {
    if (p.pi_inv[static_cast<std::size_t>(p.pi[j])] != static_cast<ad::Index>(j)) {
      throw Error("internal: pi_inv is not the inverse of pi");
    }
  }
  std::vector<int> sizes(static_cast<std::size_t>(m.config().n_clusters), 0);
  for (int l : trace.labels) ++sizes[static_cast<std::size_t>(l)];
  const json out{{"bag_id", bag.bag_id},
                 {"labels", trace.labels},
                 {"pi", p.pi},
                 {"pi_inv", p.pi_inv},
                 {"cluster_sizes", sizes}};
  std::cout << out.dump() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  semamil::tune_allocator();
  CLI::App app{"SemaMIL: semantic reordering with query-conditioned state-space scans"};
  app.require_subcommand(1);

  Common gen_c, train_c, ablate_c, grad_c, flops_c, insp_c;
  TrainArgs train_a, ablate_a;
  EvalArgs eval_a;
  std::string fault;
  std::int64_t L = 1024;
  std::string bag_path, insp_ckpt;

  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  add_common(gen, gen_c, true);

  auto* train = app.add_subcommand("train", "Run the Monte Carlo protocol");
  add_common(train, train_c, true);
  train->add_option("--data", train_a.data, "Dataset directory or manifest")->required();
  train->add_option("--jobs", train_c.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_a.checkpoint)->required();
  eval->add_option("--data", eval_a.data, "Dataset directory or manifest")->required();
  eval->add_option("--splits", eval_a.splits, "splits.json written by train");
  eval->add_option("--fold", eval_a.fold, "Restrict to this fold's test set");
  eval->add_option("--out", eval_a.out, "Directory for eval.json");

  auto* ablate = app.add_subcommand("ablate", "SR/SRSM ablation grid");
  add_common(ablate, ablate_c, true);
  ablate->add_option("--data", ablate_a.data, "Dataset directory or manifest")->required();
  ablate->add_option("--jobs", ablate_c.jobs)->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  add_common(grad, grad_c, false);
  std::vector<std::string> fault_names;
  for (const auto& [k, v] : fault_kinds()) fault_names.push_back(k);
  grad->add_option("--inject-fault", fault)->check(CLI::IsMember(fault_names))->group("");

  auto* flops = app.add_subcommand("flops", "Parameter and FLOP counts");
  add_common(flops, flops_c, false);
  flops->add_option("-L,--length", L, "Bag length")->check(CLI::PositiveNumber);

  auto* insp = app.add_subcommand("reorder-inspect", "Dump router labels and permutation");
  add_common(insp, insp_c, false);
  insp->add_option("--bag", bag_path, "SEMB file")->required();
  insp->add_option("--checkpoint", insp_ckpt, "Use a trained model instead of a fresh one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitCheck;
  }

  try {
    if (*gen) return cmd_gen(gen_c);
    if (*train) return cmd_train(train_c, train_a);
    if (*eval) return cmd_eval(eval_a);
    if (*ablate) return cmd_ablate(ablate_c, ablate_a);
    if (*grad) return cmd_gradcheck(grad_c, fault);
    if (*flops) return cmd_flops(flops_c, L);
    if (*insp) return cmd_reorder_inspect(insp_c, bag_path, insp_ckpt);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheck;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheck;
  }
  return kExitCheck;
}

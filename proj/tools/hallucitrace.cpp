// Command-line driver: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 usage error, 3 missing input file, 4 invalid
// configuration, 5 any other failure.

#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "hallucitrace/pipeline.hpp"

using namespace hallucitrace;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kMissingInput = 3, kBadConfig = 4, kFailure = 5 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out, model, world, alias_url;
  std::optional<std::size_t> threads, trace_cap;
  std::optional<std::string> sigma_mode, ie_convention, match_rule;
  std::optional<double> lambda;
  std::vector<std::size_t> layers_mlp, layers_attn;
};

/// Defaults, then the config file, then --seed (re-deriving component seeds), then flags.
RunConfig resolve_config(const Options& o) {
  if (!o.config.empty() && !std::filesystem::exists(o.config))
    throw MissingInputError("config file '" + o.config + "' does not exist");
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) {
    c.seed = *o.seed;
    derive_seeds(c);
  }
  if (!o.model.empty()) c.model_path = o.model;
  if (!o.world.empty()) c.world_path = o.world;
  if (!o.alias_url.empty()) c.alias_url = o.alias_url;
  if (o.threads) c.threads = *o.threads;
  if (o.trace_cap) c.trace_cap = *o.trace_cap;
  if (o.sigma_mode) c.trace.sigma_mode = sigma_mode_from_string(*o.sigma_mode);
  if (o.ie_convention) c.trace.convention = ie_convention_from_string(*o.ie_convention);
  if (o.match_rule) c.eval.rule = match_rule_from_string(*o.match_rule);
  if (o.lambda) c.mhm.lambda = *o.lambda;
  if (!o.layers_mlp.empty()) c.mhm.layers_mlp = o.layers_mlp;
  if (!o.layers_attn.empty()) c.mhm.layers_attn = o.layers_attn;
  if (!o.out.empty()) {
    c.out_dir = o.out;
  } else if (c.out_dir.empty()) {
    const char* env = std::getenv("HALLUCITRACE_OUT");
    c.out_dir = env && *env ? env : "out";
  }
  return c;
}

std::string fraction(double v) { return format_number(v); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal tracing, logit-lens probes and mitigation for small transformer language models"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--seed", o.seed, "global seed; re-derives every component seed");
  app.add_option("--out", o.out, "output directory (default $HALLUCITRACE_OUT, else ./out)");
  app.add_option("--model", o.model, "model file (default <out>/model.htw)");
  app.add_option("--world", o.world, "world file (default <out>/world.tsv)");
  app.add_option("--threads", o.threads, "worker threads (0 = all cores)");
  app.add_option("--alias-url", o.alias_url, "alias service URL template with {subject} and {relation}");
  app.add_option("--trace-cap", o.trace_cap, "hallucinated queries traced (0 = all)");
  app.add_option("--sigma-mode", o.sigma_mode, "noise scale")->check(CLI::IsMember({"unit", "3xstd"}));
  app.add_option("--ie-convention", o.ie_convention, "indirect-effect sign convention")
      ->check(CLI::IsMember({"main", "companion"}));
  app.add_option("--match-rule", o.match_rule, "object match rule")->check(CLI::IsMember({"prefix", "suffix"}));
  app.add_option("--lambda", o.lambda, "weight of the mitigation term")->check(CLI::NonNegativeNumber);
  app.add_option("--layers-mlp", o.layers_mlp, "MLP layers (1-based) the mitigation term reads")->delimiter(',');
  app.add_option("--layers-attn", o.layers_attn, "attention layers (1-based) the mitigation term reads")
      ->delimiter(',');

  std::function<void(const Workspace&)> action;
  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help, auto fn) {
    parent->add_subcommand(name, help)->callback([&action, fn] { action = fn; });
  };
  auto* world = app.add_subcommand("world", "synthetic world")->require_subcommand(1);
  leaf(world, "gen", "generate the world file", [](const Workspace& ws) { stage_world_gen(ws); });
  auto* corpus = app.add_subcommand("corpus", "training corpus")->require_subcommand(1);
  leaf(corpus, "gen", "render the corpus and its manifest", [](const Workspace& ws) { stage_corpus_gen(ws); });
  leaf(&app, "train", "pretrain the model with checkpoints", [](const Workspace& ws) {
    const auto log = stage_train(ws);
    std::cout << "trained " << log.size() << " steps, final loss " << format_number(log.back().loss) << '\n';
  });
  leaf(&app, "eval", "label every query factual, hallucinating or discarded", [](const Workspace& ws) {
    const auto ev = stage_eval(ws);
    const auto hf = high_frequency_accuracy(ev, ws.config.high_frequency_mentions);
    std::cout << ev.hallucinated.size() << " hallucinated of " << ev.queries.size()
              << " queries; high-frequency accuracy " << fraction(hf.accuracy()) << '\n';
  });
  leaf(&app, "trace", "causal tracing of hallucinated queries", [](const Workspace& ws) {
    const auto b = stage_trace(ws);
    std::cout << "traced " << b.outcomes.size() << " queries, skipped " << b.skipped.size() << '\n';
  });
  leaf(&app, "classify", "EarlySite/LateSite labels from stored traces", [](const Workspace& ws) {
    const auto rows = stage_classify(ws);
    const auto c = mechanism_counts(rows);
    std::cout << c["early_site"] << " EarlySite, " << c["late_site"] << " LateSite\n";
  });
  auto* lens = app.add_subcommand("lens", "logit-lens probes")->require_subcommand(1);
  leaf(lens, "esp", "per-layer object signal profiles", [](const Workspace& ws) {
    std::cout << "ESP for " << stage_lens_esp(ws).size() << " queries\n";
  });
  leaf(lens, "rank", "minimum object rank at the last subject token", [](const Workspace& ws) {
    std::cout << "ranks for " << stage_lens_rank(ws).size() << " queries\n";
  });
  leaf(&app, "manifest", "manifestation features per mechanism group", [](const Workspace& ws) {
    for (const auto& r : stage_manifest(ws).rows) std::cout << to_string(r.group) << ": " << r.count << " queries\n";
  });
  auto* mitigate = app.add_subcommand("mitigate", "targeted mitigation")->require_subcommand(1);
  leaf(mitigate, "train", "fine-tune with the mitigation objective and the plain baseline", [](const Workspace& ws) {
    const auto t = stage_mitigate_train(ws);
    std::cout << "mitigation: " << t.mhm.log.size() << " steps\n";
  });
  leaf(mitigate, "eval", "effectiveness and specificity of each method", [](const Workspace& ws) {
    for (const auto& r : stage_mitigate_eval(ws))
      std::cout << r.method << ": effectiveness " << fraction(r.result.effectiveness) << ", specificity "
                << fraction(r.result.specificity) << '\n';
  });
  leaf(&app, "ckpt-esp", "ESP trajectory across training checkpoints", [](const Workspace& ws) {
    const auto tr = stage_ckpt_esp(ws);
    std::cout << tr.points.size() << " trajectory points, " << tr.skipped.size() << " unreadable checkpoints\n";
  });
  auto* report = app.add_subcommand("report", "report bundles")->require_subcommand(1);
  leaf(report, "bundle", "regenerate aggregate reports from stored intermediates", [](const Workspace& ws) {
    std::size_t same = 0;
    const auto entries = stage_report_bundle(ws);
    for (const auto& e : entries) same += e.identical;
    std::cout << same << " of " << entries.size() << " regenerated reports match\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    const auto cfg = resolve_config(o);
    const auto ws = open_workspace(cfg, cfg.out_dir, [](const std::string& m) { std::cerr << m << '\n'; });
    action(ws);
  } catch (const MissingInputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "iro/sim.hpp"

namespace {

int simulate(const std::string& scheme, const std::string& trace_path, const std::string& synthetic,
             const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& faults_path,
             const std::vector<std::string>& attacks, const std::string& format, const std::string& out_path,
             bool dump_layout, const std::string& remap_out) {
  using namespace iro;
  SimConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config '" + config_path + "'");
    cfg = SimConfig::parse(in);
  }
  if (!scheme.empty()) cfg.scheme = parse_scheme(scheme);
  if (seed) cfg.seed = *seed;
  if (!faults_path.empty()) cfg.fault_schedule = faults_path;

  if (dump_layout) {
    const Controller c = cfg.dram ? Controller(cfg.oram, cfg.scheme, cfg.seed, *cfg.dram)
                                  : Controller(cfg.oram, cfg.scheme, cfg.seed);
    std::cout << "scheme " << to_string(cfg.scheme) << "\n" << c.layout().describe();
    const auto r = must_storage_report(c.must_geometry());
    std::cout << "must_levels " << c.must_geometry().must_levels << "\n"
              << "must_nodes " << r.total_nodes << "\n"
              << "must_non_leaf_nodes " << r.non_leaf_nodes << "\n"
              << "must_bytes_per_copy " << r.bytes_per_copy << "\n"
              << "must_cached_bytes " << r.cached_bytes << "\n\n"
              << layout::manifest(c.must_geometry().ipoffset_count());
    if (trace_path.empty() && synthetic.empty()) return 0;
  }

  std::vector<TraceOp> trace;
  if (!trace_path.empty()) {
    std::ifstream in(trace_path);
    if (!in) throw ParseError("cannot open trace '" + trace_path + "'");
    trace = parse_trace(in);
  } else if (!synthetic.empty()) {
    trace = generate_trace(SyntheticSpec::parse(synthetic), cfg.seed);
  }

  std::vector<ScheduledFault> faults;
  if (!cfg.fault_schedule.empty()) {
    std::ifstream in(cfg.fault_schedule);
    if (!in) throw ParseError("cannot open fault schedule '" + cfg.fault_schedule + "'");
    faults = parse_fault_schedule(in);
  }
  std::vector<AttackSpec> specs;
  for (const auto& a : attacks) specs.push_back(AttackSpec::parse(a));

  const RunResult res = run(cfg, trace, faults, specs);

  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw std::runtime_error("cannot write '" + out_path + "'");
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  if (format == "csv")
    out << StatsReport::csv_header() << "\n" << res.report.csv_row() << "\n";
  else
    out << res.report.to_json().dump(2) << "\n";
  if (!remap_out.empty()) {
    std::ofstream r(remap_out);
    if (!r) throw std::runtime_error("cannot write '" + remap_out + "'");
    r << res.remap_listing;
  }
  if (!res.message.empty()) std::cerr << "iro_sim: " << res.message << "\n";
  return res.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Integrity- and reliability-protected Ring ORAM simulator"};
  app.require_subcommand(1);
  auto* sim = app.add_subcommand("simulate", "Run a trace through one scheme");

  std::string scheme, trace, synthetic, config, faults, format = "json", out, remap_out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> attacks;
  bool dump_layout = false;
  sim->add_option("--scheme", scheme, "baseline | ri | rim | rimr | rimre")
      ->check(CLI::IsMember({"baseline", "ri", "rim", "rimr", "rimre"}));
  auto* t = sim->add_option("--trace", trace, "Trace file (R|W <hex addr> per line)")->check(CLI::ExistingFile);
  sim->add_option("--synthetic", synthetic, "<uniform|zipfian>,<n>,<footprint>[,<s>]")->excludes(t);
  sim->add_option("--config", config, "key = value configuration file")->check(CLI::ExistingFile);
  sim->add_option("--seed", seed, "Seed for keys, labels and synthetic traces");
  sim->add_option("--faults", faults, "Fault schedule file")->check(CLI::ExistingFile);
  sim->add_option("--attack", attacks, "tamper_bit:<at>[:<block>[:<bit>]] | replay_block:<cap>:<at>[:<block>] | "
                                       "swap_blocks:<at>[:<a>:<b>]");
  sim->add_option("--report", format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
  sim->add_option("--out", out, "Report path (default stdout)");
  sim->add_flag("--dump-layout", dump_layout, "Print the physical and bit layouts");
  sim->add_option("--remap-out", remap_out, "Write the final remap table listing");

  CLI11_PARSE(app, argc, argv);
  try {
    return simulate(scheme, trace, synthetic, config, seed, faults, attacks, format, out, dump_layout, remap_out);
  } catch (const std::exception& e) {
    std::cerr << "iro_sim: " << e.what() << "\n";
    return 1;
  }
}

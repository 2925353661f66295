#include "dimae/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>

#include "dimae/checkpoint.hpp"
#include "dimae/config.hpp"
#include "dimae/data.hpp"
#include "dimae/errors.hpp"
#include "dimae/eval.hpp"
#include "dimae/fourier_aug.hpp"
#include "dimae/png_io.hpp"
#include "dimae/rng.hpp"
#include "dimae/train.hpp"

namespace dimae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

config::RunConfig read_config(const std::string& path) {
  return path.empty() ? config::parse_run_config(json::object()) : config::load_run_config(path);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Pretraining domains recorded in a checkpoint (empty when it has none).
std::vector<std::string> checkpoint_domains(const checkpoint::Archive& a) {
  if (a.meta.contains("domains")) return a.meta.at("domains").get<std::vector<std::string>>();
  return {};
}

void adopt_image_shape(model::ModelConfig& m, const data::Dataset& ds) {
  require(!ds.samples.empty(), "dataset has no images");
  m.encoder.channels = ds.samples.front().image.channels();
  m.encoder.image_size = ds.samples.front().image.height();
  require(ds.samples.front().image.width() == m.encoder.image_size, "images must be square");
}

struct Common {
  std::vector<std::string> argv;
};

// generate-data ------------------------------------------------------------

struct GenerateArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_generate(const GenerateArgs& a, const Common& c, std::ostream& out) {
  data::SyntheticSpec spec;
  if (!a.spec.empty()) {
    std::ifstream in(a.spec);
    if (!in) throw IoError("cannot read spec " + a.spec);
    try {
      spec = json::parse(in).get<data::SyntheticSpec>();
    } catch (const json::exception& e) {
      throw ValidationError("spec " + a.spec + ": " + e.what());
    }
  }
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  config::require_fresh_output(a.out);
  const auto ds = data::generate_synthetic(spec);
  config::write_manifest(a.out, {"generate-data", c.argv, json(spec), {{"root", spec.seed}}, {"<domain>/<class>/*.png"}});
  data::save_folder(ds, a.out);
  out << "wrote " << ds.size() << " images (" << ds.registry.size() << " domains, " << ds.num_classes()
      << " classes) to " << a.out << '\n';
  return kExitOk;
}

// augment ------------------------------------------------------------------

struct AugmentArgs {
  std::string input_dir;
  std::string domains;
  std::string mode = "stylemix";
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  int limit = 0;
};

int run_augment(const AugmentArgs& a, const Common& c, std::ostream& out) {
  auto cfg = read_config(a.config);
  cfg.stylemix.mode = fourier::mix_mode_from_string(a.mode);
  require(a.limit >= 0, "--limit must be non-negative");
  auto ds = data::load_folder(a.input_dir);
  if (!a.domains.empty()) ds = data::select_domains(ds, split_list(a.domains));
  if (cfg.stylemix.mode != fourier::MixMode::None) {
    require(ds.registry.size() >= 2, "augmentation needs at least 2 domains (N_d >= 2), got " +
                                         std::to_string(ds.registry.size()));
  }
  config::require_fresh_output(a.out);
  json manifest_cfg{{"stylemix", cfg.stylemix}, {"input_dir", a.input_dir}, {"domains", ds.registry.names()}};
  config::write_manifest(a.out, {"augment", c.argv, manifest_cfg, {{"root", a.seed}},
                                 {"<domain>/<class>/*.png", "<domain>/<class>/*.json"}});

  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(ds.registry.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) pools[static_cast<std::size_t>(ds.samples[i].domain)].push_back(i);
  std::vector<int> written(static_cast<std::size_t>(ds.registry.size()), 0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    if (a.limit > 0 && written[static_cast<std::size_t>(s.domain)] >= a.limit) continue;
    ++written[static_cast<std::size_t>(s.domain)];
    Rng rng(derive_seed(a.seed, "augment", {i}));
    std::vector<ImageTensor> aux;
    std::vector<std::string> aux_paths;
    if (cfg.stylemix.mode != fourier::MixMode::None) {
      for (int d = 0; d < ds.registry.size(); ++d) {
        if (d == s.domain) continue;
        const auto& pool = pools[static_cast<std::size_t>(d)];
        require(!pool.empty(), "domain " + ds.registry.name(d) + " has no images");
        const auto pick = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
        aux.push_back(ds.samples[pick].image);
        aux.back().domain = d;
        aux_paths.push_back(ds.samples[pick].path);
      }
    }
    ImageTensor x = s.image;
    x.domain = s.domain;
    fourier::MixRecord record;
    const auto y = fourier::augment(x, aux, cfg.stylemix, rng, &record);
    const fs::path rel = fs::path(ds.registry.name(s.domain)) / ds.class_names.at(static_cast<std::size_t>(s.label)) /
                         fs::path(s.path).stem();
    const fs::path png = fs::path(a.out) / (rel.string() + ".png");
    io::write_png(png, y);
    json side{{"source", s.path}, {"domain", ds.registry.name(s.domain)}, {"mode", a.mode},
              {"aux", aux_paths}, {"record", record}};
    write_json(fs::path(a.out) / (rel.string() + ".json"), side);
    ++count;
  }
  out << "wrote " << count << " augmented images to " << a.out << '\n';
  return kExitOk;
}

// pretrain -----------------------------------------------------------------

struct PretrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
  int epochs = 0;
};

int run_pretrain(const PretrainArgs& a, const Common& c, std::ostream& out) {
  auto cfg = read_config(a.config);
  if (a.epochs > 0) {
    cfg.train.epochs = a.epochs;
    cfg.validate();
  }
  auto ds = data::load_folder(a.data);
  const auto names = config::pretrain_domains(cfg.data, ds.registry.names());
  require(names.size() >= 2, "pretraining needs at least 2 domains (N_d >= 2), got " + std::to_string(names.size()));
  ds = data::select_domains(ds, names);
  cfg.model.num_domains = static_cast<int>(names.size());
  adopt_image_shape(cfg.model, ds);
  cfg.model.validate();
  cfg.train.seed = cfg.train_seed();

  train::PretrainOptions opts;
  opts.train = cfg.train;
  opts.objective = cfg.objective();
  opts.out_dir = a.out;

  std::optional<checkpoint::Archive> resume;
  if (!a.resume.empty()) {
    resume = checkpoint::read_archive(a.resume);
    require(resume->config.value("train", json()) == json(opts.train) &&
                resume->config.value("objective", json()) == json(opts.objective) &&
                resume->config.value("model", json()) == json(cfg.model),
            "resume checkpoint was written with a different configuration");
    require(checkpoint_domains(*resume) == names, "resume checkpoint was trained on different domains");
  }
  config::require_fresh_output(a.out);
  config::write_manifest(a.out, {"pretrain",
                                 c.argv,
                                 config::to_json(cfg),
                                 {{"root", cfg.seed}, {"init", cfg.init_seed()}, {"train", cfg.train_seed()}},
                                 {"metrics.jsonl", "checkpoint_final.ckpt"}});

  model::MaskedAutoencoder<float> model(cfg.model, cfg.init_seed());
  opts.on_epoch = [&out](const train::EpochMetrics& m) { out << train::metrics_line(m) << '\n' << std::flush; };
  const auto result = train::pretrain(ds, model, opts, resume ? &*resume : nullptr);
  out << "final checkpoint: " << result.final_checkpoint.string() << '\n';
  return kExitOk;
}

// probe / finetune ---------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string config;
  std::string target;
  std::string target_data;
  std::optional<double> label_fraction;
  bool fraction_rule = false;
};

int run_eval(const EvalArgs& a, const Common& c, eval::Method method, std::ostream& out) {
  auto cfg = read_config(a.config);
  if (a.label_fraction) cfg.eval.label_fraction = *a.label_fraction;
  require(cfg.eval.label_fraction > 0.0 && cfg.eval.label_fraction <= 1.0, "label fraction must be in (0, 1]");
  const auto archive = checkpoint::read_archive(a.checkpoint);
  const auto model = checkpoint::load_model<float>(archive);
  const auto all = data::load_folder(a.data);

  auto pre = checkpoint_domains(archive);
  if (pre.empty()) pre = config::pretrain_domains(cfg.data, all.registry.names());
  std::vector<std::string> targets = a.target.empty() ? cfg.data.target_domains : split_list(a.target);
  // Held-out domains may live under their own root; all of its domains by default.
  const auto target_root = a.target_data.empty() ? all : data::load_folder(a.target_data);
  if (!a.target_data.empty() && targets.empty()) targets = target_root.registry.names();

  eval::ProtocolConfig pc = cfg.eval.protocol;
  pc.seed = cfg.eval_seed();
  pc.method = a.fraction_rule ? eval::Method::Auto : method;
  const std::string command = method == eval::Method::Probe ? "probe" : "finetune";

  config::require_fresh_output(a.out);
  config::write_manifest(a.out, {command, c.argv, config::to_json(cfg),
                                 {{"root", cfg.seed}, {"eval", cfg.eval_seed()}},
                                 {command + ".json"}});
  eval::ProtocolResult result;
  if (targets.empty()) {
    require(method == eval::Method::Probe, "finetune needs --target domains held out from pretraining");
    const auto ds = data::select_domains(all, pre);
    result = eval::in_domain_probe(model, ds, cfg.eval.test_fraction, pc);
  } else {
    std::vector<std::string> source;
    for (const auto& d : pre) {
      if (all.registry.find(d)) source.push_back(d);
    }
    require(!source.empty(), "none of the pretraining domains is present in " + a.data);
    result = eval::cross_domain_protocol(model, data::select_domains(all, source),
                                         data::select_domains(target_root, targets),
                                         cfg.eval.label_fraction, pc, pre);
  }
  json j = result;
  write_json(fs::path(a.out) / (command + ".json"), j);
  for (const auto& s : result.per_domain) out << s.domain << ": " << s.accuracy() << '\n';
  out << "avg: " << result.avg << "\noverall: " << result.overall << "\nmethod: " << eval::to_string(result.method)
      << '\n';
  return kExitOk;
}

// ablate -------------------------------------------------------------------

struct AblateArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string target;
  std::string target_data;
};

int run_ablate(const AblateArgs& a, const Common& c, std::ostream& out) {
  auto cfg = read_config(a.config);
  if (!a.target.empty()) cfg.data.target_domains = split_list(a.target);
  const auto all = data::load_folder(a.data);
  const auto target_root = a.target_data.empty() ? all : data::load_folder(a.target_data);
  if (!a.target_data.empty() && cfg.data.target_domains.empty()) cfg.data.target_domains = target_root.registry.names();
  require(!cfg.data.target_domains.empty(),
          "ablation needs held-out target domains (--target, --target-data or data.target_domains)");
  const auto names = config::pretrain_domains(cfg.data, all.registry.names());
  require(names.size() >= 2, "pretraining needs at least 2 domains (N_d >= 2), got " + std::to_string(names.size()));
  const auto pre = data::select_domains(all, names);
  const auto target = data::select_domains(target_root, cfg.data.target_domains);

  eval::AblationSpec spec;
  spec.modes = cfg.eval.ablation_modes;
  spec.single_decoder = cfg.eval.ablation_single_decoder;
  spec.decoder_depths = cfg.eval.ablation_depths;
  spec.seeds = cfg.eval.ablation_seeds;
  spec.model = cfg.model;
  adopt_image_shape(spec.model, pre);
  spec.train = cfg.train;
  spec.objective = cfg.objective();
  spec.probe = cfg.eval.protocol.probe;
  spec.label_fraction = cfg.eval.label_fraction;

  config::require_fresh_output(a.out);
  config::write_manifest(a.out, {"ablate", c.argv, config::to_json(cfg), {{"seeds", spec.seeds}},
                                 {"ablation.csv", "ablation.json"}});
  const auto rows = eval::ablation_runner(spec, pre, target, [&out](const std::string& line) {
    out << line << '\n' << std::flush;
  });
  eval::write_ablation_csv(fs::path(a.out) / "ablation.csv", rows);
  auto j = json::array();
  for (const auto& r : rows) {
    j.push_back({{"mode", fourier::to_string(r.cell.mode)},
                 {"decoder", r.cell.single_decoder ? "single" : "multi"},
                 {"decoder_depth", r.cell.decoder_depth},
                 {"seeds", r.seeds},
                 {"accuracies", r.accuracies},
                 {"mean", r.mean},
                 {"std", r.stddev}});
  }
  write_json(fs::path(a.out) / "ablation.json", j);
  return kExitOk;
}

// reconstruct --------------------------------------------------------------

struct ReconstructArgs {
  std::string checkpoint;
  std::string data;
  std::string source_domain;
  std::string decoder = "all";
  std::string out;
  int count = 4;
  std::uint64_t seed = 0;
  std::optional<double> p_visible;
};

int run_reconstruct(const ReconstructArgs& a, const Common& c, std::ostream& out) {
  require(a.count >= 1, "--count must be at least 1");
  const auto archive = checkpoint::read_archive(a.checkpoint);
  const auto model = checkpoint::load_model<float>(archive);
  const auto ds = data::load_folder(a.data);
  const DomainId src = ds.registry.id(a.source_domain);
  const auto names = checkpoint_domains(archive);
  const int n_dec = model.config().num_decoders();

  std::vector<int> decoders;
  if (a.decoder == "all") {
    for (int d = 0; d < n_dec; ++d) decoders.push_back(d);
  } else {
    for (const auto& item : split_list(a.decoder)) {
      auto it = std::find(names.begin(), names.end(), item);
      if (it != names.end()) {
        decoders.push_back(model.route(static_cast<DomainId>(it - names.begin())));
      } else {
        int idx = -1;
        try {
          std::size_t used = 0;
          idx = std::stoi(item, &used);
          if (used != item.size()) idx = -1;
        } catch (const std::exception&) {
          idx = -1;
        }
        require(idx >= 0 && idx < n_dec, "unknown decoder '" + item + "'");
        decoders.push_back(idx);
      }
    }
  }
  double p = a.p_visible.value_or(archive.config.contains("objective")
                                      ? archive.config.at("objective").value("p_visible", 0.25)
                                      : 0.25);

  config::require_fresh_output(a.out);
  config::write_manifest(a.out, {"reconstruct", c.argv,
                                 {{"source_domain", a.source_domain}, {"decoders", decoders}, {"p_visible", p}},
                                 {{"root", a.seed}}, {"reconstruction.png"}});
  std::vector<ImageTensor> rows;
  const auto idx = ds.indices_of(src);
  for (int k = 0; k < a.count && k < static_cast<int>(idx.size()); ++k) {
    const auto r = eval::reconstruct(model, ds.samples[idx[k]].image, decoders, p,
                                     derive_seed(a.seed, "mask", {static_cast<std::uint64_t>(k)}));
    std::vector<ImageTensor> row{r.input, r.masked};
    row.insert(row.end(), r.outputs.begin(), r.outputs.end());
    rows.push_back(eval::tile_row(row));
  }
  require(!rows.empty(), "domain " + a.source_domain + " has no images");
  io::write_png(fs::path(a.out) / "reconstruction.png", eval::tile_column(rows));
  out << "columns: input, masked";
  for (int d : decoders) out << ", decoder " << d << (d < static_cast<int>(names.size()) && n_dec > 1 ? " (" + names[d] + ")" : "");
  out << "\nwrote " << (fs::path(a.out) / "reconstruction.png").string() << '\n';
  return kExitOk;
}

// export-features ----------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

int run_export(const ExportArgs& a, const Common& c, std::ostream& out) {
  const auto archive = checkpoint::read_archive(a.checkpoint);
  const auto model = checkpoint::load_model<float>(archive);
  const auto ds = data::load_folder(a.data);
  config::require_fresh_output(a.out);
  config::write_manifest(a.out, {"export-features", c.argv, {{"checkpoint", a.checkpoint}, {"data", a.data}}, json::object(),
                                 {"features.csv"}});
  const auto rows = eval::export_features(model, ds, fs::path(a.out) / "features.csv");
  out << "wrote " << rows << " feature rows\n";
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-invariant masked autoencoder toolkit", "dimae"};
  app.set_version_flag("--version", config::version_string());
  app.require_subcommand(1);

  Common common{args};

  GenerateArgs gen;
  auto* sc_gen = app.add_subcommand("generate-data", "Write a synthetic multi-domain dataset");
  sc_gen->add_option("--spec", gen.spec, "SyntheticSpec JSON file (defaults when omitted)");
  sc_gen->add_option("--out", gen.out, "Output dataset root")->required();
  sc_gen->add_option("--seed", gen.seed, "Override the spec seed");

  AugmentArgs aug;
  auto* sc_aug = app.add_subcommand("augment", "Write augmented views of a dataset");
  sc_aug->add_option("--input-dir", aug.input_dir, "Dataset root <domain>/<class>/*.png")->required();
  sc_aug->add_option("--domains", aug.domains, "Comma-separated subset of domains");
  sc_aug->add_option("--mode", aug.mode, "stylemix|stylecut|mixup|cutmix|styletransfer|none");
  sc_aug->add_option("--seed", aug.seed, "Root seed");
  sc_aug->add_option("--out", aug.out, "Output directory")->required();
  sc_aug->add_option("--config", aug.config, "Run config JSON (stylemix section is used)");
  sc_aug->add_option("--limit", aug.limit, "Images per domain (0 = all)");

  PretrainArgs pre;
  auto* sc_pre = app.add_subcommand("pretrain", "Cross-domain masked reconstruction pretraining");
  sc_pre->add_option("--data", pre.data, "Dataset root")->required();
  sc_pre->add_option("--config", pre.config, "Run config JSON");
  sc_pre->add_option("--out", pre.out, "Output directory")->required();
  sc_pre->add_option("--resume", pre.resume, "Continue from a checkpoint written by pretrain");
  sc_pre->add_option("--epochs", pre.epochs, "Override train.epochs");

  EvalArgs probe;
  auto* sc_probe = app.add_subcommand("probe", "Linear probe on frozen features");
  EvalArgs ft;
  auto* sc_ft = app.add_subcommand("finetune", "Fine-tune the encoder with a linear classifier");
  for (auto [sc, ea] : {std::pair{sc_probe, &probe}, std::pair{sc_ft, &ft}}) {
    sc->add_option("--checkpoint", ea->checkpoint, "Pretrained checkpoint")->required();
    sc->add_option("--data", ea->data, "Dataset root")->required();
    sc->add_option("--out", ea->out, "Output directory")->required();
    sc->add_option("--config", ea->config, "Run config JSON (eval section)");
    sc->add_option("--target", ea->target, "Comma-separated held-out target domains");
    sc->add_option("--target-data", ea->target_data, "Separate dataset root holding the target domains");
    sc->add_option("--label-fraction", ea->label_fraction, "Labelled share of the source data, in (0, 1]");
    sc->add_flag("--fraction-rule", ea->fraction_rule,
                 "Choose probe (< 0.10) or full fine-tune (>= 0.10) from the label fraction");
  }

  AblateArgs abl;
  auto* sc_abl = app.add_subcommand("ablate", "Augmentation x decoder x depth ablation grid");
  sc_abl->add_option("--data", abl.data, "Dataset root")->required();
  sc_abl->add_option("--config", abl.config, "Run config JSON");
  sc_abl->add_option("--out", abl.out, "Output directory")->required();
  sc_abl->add_option("--target", abl.target, "Comma-separated held-out target domains");
  sc_abl->add_option("--target-data", abl.target_data, "Separate dataset root holding the target domains");

  ReconstructArgs rec;
  auto* sc_rec = app.add_subcommand("reconstruct", "Reconstruction grids through chosen decoders");
  sc_rec->add_option("--checkpoint", rec.checkpoint, "Pretrained checkpoint")->required();
  sc_rec->add_option("--data", rec.data, "Dataset root")->required();
  sc_rec->add_option("--source-domain", rec.source_domain, "Domain of the input images")->required();
  sc_rec->add_option("--decoder", rec.decoder, "Decoder domain name(s), index(es) or 'all'");
  sc_rec->add_option("--out", rec.out, "Output directory")->required();
  sc_rec->add_option("--count", rec.count, "Number of input images");
  sc_rec->add_option("--seed", rec.seed, "Mask seed");
  sc_rec->add_option("--p-visible", rec.p_visible, "Visible patch share (defaults to the checkpoint's)");

  ExportArgs exp;
  auto* sc_exp = app.add_subcommand("export-features", "Write encoder features as CSV");
  sc_exp->add_option("--checkpoint", exp.checkpoint, "Pretrained checkpoint")->required();
  sc_exp->add_option("--data", exp.data, "Dataset root")->required();
  sc_exp->add_option("--out", exp.out, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: usage: " << one_line(e.what()) << '\n';
    const CLI::App* help_for = &app;
    for (auto* sub : app.get_subcommands()) help_for = sub;
    err << help_for->help();
    return kExitUsage;
  }

  try {
    if (sc_gen->parsed()) return run_generate(gen, common, out);
    if (sc_aug->parsed()) return run_augment(aug, common, out);
    if (sc_pre->parsed()) return run_pretrain(pre, common, out);
    if (sc_probe->parsed()) return run_eval(probe, common, eval::Method::Probe, out);
    if (sc_ft->parsed()) return run_eval(ft, common, eval::Method::Finetune, out);
    if (sc_abl->parsed()) return run_ablate(abl, common, out);
    if (sc_rec->parsed()) return run_reconstruct(rec, common, out);
    if (sc_exp->parsed()) return run_export(exp, common, out);
  } catch (const ValidationError& e) {
    err << "error: validation: " << one_line(e.what()) << '\n';
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: io: " << one_line(e.what()) << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io: " << one_line(e.what()) << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    err << "error: numeric: " << one_line(e.what()) << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << '\n';
    return kExitFailure;
  }
  err << "error: usage: no subcommand\n" << app.help();
  return kExitUsage;
}

}  // namespace dimae::cli

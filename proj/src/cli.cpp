#include "afseg/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>

#include "CLI11.hpp"
#include "afseg/checkpoint.hpp"
#include "afseg/config.hpp"
#include "afseg/dataset.hpp"
#include "afseg/episodic.hpp"
#include "afseg/npy.hpp"
#include "afseg/pgm.hpp"
#include "afseg/spectral.hpp"

namespace afseg {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// (3, H, W) or (1, 3, H, W) float array -> (1, 3, H, W).
TensorD read_image(const fs::path& path) {
  TensorD t = npy::read<double>(path.string());
  if (t.rank() == 3 && t.dim(0) == 3) return t.reshaped({1, 3, t.dim(1), t.dim(2)});
  if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 3) return t;
  throw InvalidInput(path.string() + ": expected an image of shape (3, H, W), got " + shape_str(t.shape()));
}

/// support_<i>.npy files in numeric order, with the matching .pgm when present.
struct SupportSet {
  std::vector<TensorD> images;
  std::vector<Mask> masks;
  std::vector<fs::path> paths;
};

SupportSet read_supports(const fs::path& dir, bool need_masks) {
  if (!fs::is_directory(dir)) throw InvalidInput(dir.string() + " is not a directory");
  static const std::regex name(R"(support_(\d+)\.npy)");
  std::vector<std::pair<long, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string file = e.path().filename().string();
    if (std::regex_match(file, m, name)) found.emplace_back(std::stol(m[1]), e.path());
  }
  if (found.empty()) throw InvalidInput(dir.string() + ": no support_<i>.npy files");
  std::sort(found.begin(), found.end());
  SupportSet s;
  for (const auto& [i, path] : found) {
    s.images.push_back(read_image(path));
    s.paths.push_back(path);
    fs::path mask = path;
    mask.replace_extension(".pgm");
    if (fs::exists(mask)) {
      s.masks.push_back(pgm::read(mask.string()));
      if (s.masks.back().rows() != s.images.back().dim(2) || s.masks.back().cols() != s.images.back().dim(3))
        throw InvalidInput(mask.string() + ": mask size differs from its image");
    } else if (need_masks) {
      throw InvalidInput("oracle mode needs " + mask.string());
    }
  }
  if (!need_masks) s.masks.clear();
  return s;
}

/// Feature file -> a one-level pyramid (1, C, H, W). An (N, D) matrix is read as
/// N = grid * grid row-major pixels with D features each.
std::vector<TensorD> read_features(const fs::path& path, Index grid) {
  TensorD t = npy::read<double>(path.string());
  if (t.rank() == 2) {
    const Index n = t.dim(0), d = t.dim(1);
    if (n != grid * grid)
      throw InvalidInput(path.string() + ": " + std::to_string(n) + " rows do not form a " + std::to_string(grid) +
                         "x" + std::to_string(grid) + " grid");
    TensorD map(Shape{1, d, grid, grid});
    for (Index p = 0; p < n; ++p)
      for (Index c = 0; c < d; ++c) map[c * n + p] = t[p * d + c];
    return {map};
  }
  if (t.rank() == 3) return {t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)})};
  if (t.rank() == 4 && t.dim(0) == 1) return {t};
  throw InvalidInput(path.string() + ": expected (N, D), (C, H, W) or (1, C, H, W) features, got " +
                     shape_str(t.shape()));
}

nlohmann::json bbox_json(const BBox& b) {
  return {{"row_min", b.row_min}, {"row_max", b.row_max}, {"col_min", b.col_min}, {"col_max", b.col_max}};
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

// ---- subcommands

struct SynthArgs {
  std::string out;
  int classes = 12, per_class = 10, test_classes = 0;
  Index size = 64;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  SynthOptions o;
  o.classes = a.classes;
  o.per_class = a.per_class;
  o.image_size = a.size;
  o.test_classes = a.test_classes;
  o.seed = a.seed;
  const Dataset ds = synth_dataset(o);
  save_dataset(ds, a.out);
  out << "wrote " << ds.samples.size() << " samples (" << ds.train_classes.size() << " train classes, "
      << ds.test_classes.size() << " test classes) to " << a.out << "\n";
  return 0;
}

struct DecomposeArgs {
  std::string features, mode = "sym", out;
  Index grid = 16, n_vectors = 5;
};

int run_decompose(const DecomposeArgs& a, std::ostream& out) {
  spectral::SpectralOptions opt;
  opt.grid_h = opt.grid_w = a.grid;
  opt.mode = spectral::laplacian_mode_from_string(a.mode);
  opt.n_vectors = a.n_vectors;
  const auto pyramid = read_features(a.features, a.grid);
  const auto hc = spectral::build_hypercolumn(pyramid, a.grid, a.grid);
  const auto es =
      spectral::laplacian_eigensystem(spectral::affinity_matrix(hc), opt.mode, opt.n_vectors, opt.solver);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  nlohmann::json ev = {{"mode", spectral::to_string(opt.mode)},
                       {"grid", a.grid},
                       {"eigenvalues", std::vector<double>(es.values.data(), es.values.data() + es.values.size())},
                       {"max_residual", es.max_residual}};
  for (Index k = 0; k < es.vectors.cols(); ++k) {
    TensorD v(Shape{a.grid, a.grid});
    for (Index i = 0; i < v.size(); ++i) v[i] = es.vectors(i, k);
    npy::write((dir / ("eigvec_" + std::to_string(k) + ".npy")).string(), v);
  }
  // Eigenpairs are written before the split so a degenerate case can be inspected.
  spectral::PartitionResult part;
  try {
    part = spectral::fiedler_partition(es, a.grid, a.grid);
  } catch (const NumericalError&) {
    write_json(dir / "eigenvalues.json", ev);
    throw;
  }
  ev["fiedler_index"] = part.fiedler_index;
  write_json(dir / "eigenvalues.json", ev);
  pgm::write((dir / "partition.pgm").string(), part.mask);
  nlohmann::json bb = bbox_json(part.bbox);
  bb["grid_h"] = a.grid;
  bb["grid_w"] = a.grid;
  bb["foreground_pixels"] = part.foreground_pixels;
  write_json(dir / "bbox.json", bb);
  out << "fiedler index " << part.fiedler_index << ", lambda " << es.values[part.fiedler_index] << ", foreground "
      << part.foreground_pixels << "/" << a.grid * a.grid << " pixels\n";
  return 0;
}

struct PrototypeArgs {
  std::string support_dir, mode = "free", out, config, ckpt;
  std::optional<std::uint64_t> seed;
};

int run_prototype(const PrototypeArgs& a, std::ostream& out) {
  RunConfig cfg = a.ckpt.empty() ? config_or_default(a.config) : load_checkpoint(a.ckpt).config;
  if (a.seed) cfg.seed = *a.seed;
  const auto mode = episodic::support_mode_from_string(a.mode);
  const auto sup = read_supports(a.support_dir, mode == episodic::SupportMode::OracleMask);
  const ToyEncoder encoder(cfg.encoder_config());
  std::vector<episodic::Prototypes> shots;
  for (std::size_t i = 0; i < sup.images.size(); ++i) {
    const auto pyramid = encoder.encode(sup.images[i]);
    try {
      shots.push_back(episodic::single_shot_prototype(pyramid, sup.masks.empty() ? nullptr : &sup.masks[i], mode,
                                                      cfg.spectral_options()));
    } catch (const NumericalError& e) {
      throw NumericalError(sup.paths[i].string() + ": " + e.what());
    }
  }
  const auto proto = episodic::aggregate_prototypes(shots);
  Index total = 0;
  std::vector<Index> dims;
  for (const auto& v : proto.levels) dims.push_back(v.size()), total += v.size();
  TensorD flat(Shape{total});
  Index o = 0;
  for (const auto& v : proto.levels)
    for (Index i = 0; i < v.size(); ++i) flat[o++] = v[i];
  const fs::path path(a.out);
  ensure_parent(path);
  npy::write(path.string(), flat);
  fs::path side = path;
  side.replace_extension(".json");
  write_json(side, {{"levels", dims}, {"mode", episodic::to_string(mode)}, {"shots", shots.size()}, {"seed", cfg.seed}});
  out << "prototype of " << shots.size() << " shot(s), " << total << " values -> " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out, log;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = config_or_default(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const Dataset ds = load_dataset(a.data);
  const ToyEncoder encoder(cfg.encoder_config());
  const std::uint64_t checksum = encoder.checksum();
  episodic::FeatureCache cache(encoder, cfg.spectral_options());

  std::ofstream log;
  if (!a.log.empty()) {
    ensure_parent(a.log);
    log.open(a.log, std::ios::binary);
    if (!log) throw InvalidInput("cannot write " + a.log);
  }
  double last_loss = 0;
  auto params = episodic::train_toy(ds, cache, cfg.decoder_config(), cfg.train_config(),
                                    [&](const episodic::TrainRecord& r) {
                                      if (log) log << r.to_json().dump() << "\n" << std::flush;
                                      last_loss = r.loss_bce + r.loss_dice;
                                    });
  if (encoder.checksum() != checksum) throw NumericalError("encoder weights changed during training");
  save_checkpoint(a.out, cfg, params);
  out << "trained " << cfg.episodes << " episodes, last loss " << last_loss << ", checkpoint " << a.out << "\n";
  return 0;
}

struct InferArgs {
  std::string ckpt, episode_dir, mode, out;
};

int run_infer(const InferArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto mode = a.mode.empty() ? ck.config.support_mode() : episodic::support_mode_from_string(a.mode);
  const fs::path dir(a.episode_dir);
  const auto sup = read_supports(dir, mode == episodic::SupportMode::OracleMask);
  const TensorD query = read_image(dir / "query.npy");
  const ToyEncoder encoder(ck.config.encoder_config());
  auto params = ck.params;
  const Mask mask =
      episodic::infer_mask(sup.images, sup.masks, query, params, encoder, ck.config.spectral_options(), mode);
  ensure_parent(a.out);
  pgm::write(a.out, mask);
  out << "wrote " << a.out;
  if (fs::exists(dir / "query.pgm")) {
    const auto row = metrics::metrics_row(0, mask, pgm::read((dir / "query.pgm").string()));
    out << " (iou " << row.iou << ", dsc " << row.dsc << ")";
  }
  out << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, split = "test", report, mode;
  Index k = 1, threads = 1;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset ds = load_dataset(a.data);
  const ToyEncoder encoder(ck.config.encoder_config());
  episodic::FeatureCache cache(encoder, ck.config.spectral_options());
  episodic::EvalConfig e;
  e.k = a.k;
  e.mode = a.mode.empty() ? ck.config.support_mode() : episodic::support_mode_from_string(a.mode);
  e.seed = a.seed ? *a.seed : ck.config.seed;
  e.threads = a.threads;
  e.split = split_from_string(a.split);
  if (e.threads < 1) throw InvalidInput("--threads must be >= 1");
  auto params = ck.params;
  const auto res = episodic::evaluate_split(ds, params, cache, e);
  nlohmann::json j = metrics::to_json(res.report);
  j["k"] = e.k;
  j["mode"] = episodic::to_string(e.mode);
  j["split"] = to_string(e.split);
  j["seed"] = e.seed;
  j["episodes"] = res.rows.size();
  if (!a.report.empty()) write_json(a.report, j);
  out << metrics::to_text(res.report);
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Annotation-free few-shot segmentation toolkit", "afseg"};
  app.require_subcommand(1);
  app.fallthrough(false);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic few-shot dataset");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--classes", synth.classes, "number of classes")->check(CLI::PositiveNumber);
  s->add_option("--per-class", synth.per_class, "samples per class")->check(CLI::PositiveNumber);
  s->add_option("--size", synth.size, "image side, divisible by 32");
  s->add_option("--test-classes", synth.test_classes, "held-out classes (0: a third)");
  s->add_option("--seed", synth.seed);

  DecomposeArgs dec;
  auto* d = app.add_subcommand("decompose", "spectral decomposition of a feature map");
  d->add_option("--features", dec.features, "NPY features: (G*G, D), (C, H, W) or (1, C, H, W)")->required();
  d->add_option("--grid", dec.grid, "affinity grid side");
  d->add_option("--mode", dec.mode, "Laplacian normalization")->check(CLI::IsMember({"sym", "rw"}));
  d->add_option("--n-eigenvectors", dec.n_vectors);
  d->add_option("--out", dec.out, "output directory")->required();

  PrototypeArgs pro;
  auto* p = app.add_subcommand("prototype", "support prototypes from support_<i>.npy images");
  p->add_option("--support-dir", pro.support_dir)->required();
  p->add_option("--mode", pro.mode)->check(CLI::IsMember({"free", "oracle"}));
  p->add_option("--out", pro.out, "prototype vector (.npy)")->required();
  p->add_option("--config", pro.config, "run config for the encoder and grid");
  p->add_option("--ckpt", pro.ckpt, "take the run config from a checkpoint");
  p->add_option("--seed", pro.seed);

  TrainArgs tr;
  auto* t = app.add_subcommand("train-toy", "episodic decoder training");
  t->add_option("--data", tr.data)->required();
  t->add_option("--config", tr.config, "run config JSON");
  t->add_option("--out", tr.out, "checkpoint directory")->required();
  t->add_option("--log", tr.log, "JSON-lines training log");
  t->add_option("--seed", tr.seed, "overrides the config seed");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "segment query.npy of an episode directory");
  i->add_option("--ckpt", inf.ckpt)->required();
  i->add_option("--episode-dir", inf.episode_dir)->required();
  i->add_option("--mode", inf.mode, "free or oracle (default: as trained)")->check(CLI::IsMember({"free", "oracle"}));
  i->add_option("--out", inf.out, "mask (.pgm)")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}));
  e->add_option("--k", ev.k, "shots")->check(CLI::PositiveNumber);
  e->add_option("--report", ev.report, "report JSON");
  e->add_option("--mode", ev.mode, "free or oracle (default: as trained)")->check(CLI::IsMember({"free", "oracle"}));
  e->add_option("--seed", ev.seed, "support sampling seed (default: checkpoint seed)");
  e->add_option("--threads", ev.threads);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    err << "\n" << app.help();
    return 1;
  }

  try {
    if (s->parsed()) return run_synth(synth, out);
    if (d->parsed()) return run_decompose(dec, out);
    if (p->parsed()) return run_prototype(pro, out);
    if (t->parsed()) return run_train(tr, out);
    if (i->parsed()) return run_infer(inf, out);
    if (e->parsed()) return run_eval(ev, out);
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return 2;
  } catch (const InvalidInput& ex) {
    err << "invalid input: " << ex.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& ex) {
    err << "invalid input: " << ex.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& ex) {
    err << "invalid input: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args);
}

}  // namespace afseg

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchcad/patchcad.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchcad;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  Config resolve() const {
    Config cfg = resolve_config(config_path);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "JSON config file (falls back to $P2C_CONFIG, then defaults)");
  cmd->add_option("--seed", common.seed, "Seed overriding the config seed");
}

void require_valid(const Config& cfg) {
  const auto problems = validate(cfg);
  if (problems.empty()) return;
  std::string msg;
  for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
  throw Error("config_invalid", msg);
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write " + path);
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io_error", "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("bad_json", path + ": " + e.what());
  }
}

// Query rasters are SHAD files; masks may come from a SHAD or an NMAP file.
std::vector<std::uint8_t> load_mask(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open mask " + path);
  char magic[4] = {};
  in.read(magic, 4);
  const std::string m(magic, 4);
  if (m == "NMAP") return load_nmap(path).mask;
  if (m == "SHAD") return load_shad(path).mask;
  throw Error("bad_magic", "mask file must be an NMAP or SHAD raster");
}

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw Error("invalid_argument", "bad value '" + item + "' in --values");
    out.push_back(v);
  }
  if (out.empty()) throw Error("invalid_argument", "--values is empty");
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-embedding CAD retrieval on synthetic shape benchmarks"};
  app.require_subcommand(1);
  Common common;

  // synth
  std::string synth_out;
  std::size_t synth_num = 20, synth_views = 5;
  double synth_leave_out = 0.0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark (OBJ meshes + benchmark.json)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--num", synth_num, "Number of shapes")->capture_default_str();
  synth->add_option("--leave-out", synth_leave_out, "Fraction of shapes held out of the database")->capture_default_str();
  synth->add_option("--views-per-query", synth_views, "Query views per shape")->capture_default_str();
  add_common(synth, common);

  // views
  std::string views_out;
  std::optional<std::size_t> views_samples, views_k;
  auto* views = app.add_subcommand("views", "Select canonical views by K-medoids over random rotations");
  views->add_option("--samples", views_samples, "Number of candidate rotations (default: config)");
  views->add_option("--k", views_k, "Number of views (default: config)");
  views->add_option("--out", views_out, "Output JSON file")->required();
  add_common(views, common);

  // render
  std::string render_mesh, render_views, render_out;
  std::optional<std::uint32_t> render_res;
  auto* render = app.add_subcommand("render", "Render normal maps and shaded images of a mesh at every view");
  render->add_option("--mesh", render_mesh, "OBJ file")->required();
  render->add_option("--views", render_views, "View set JSON")->required();
  render->add_option("--res", render_res, "Resolution (default: config)");
  render->add_option("--out", render_out, "Output directory")->required();
  add_common(render, common);

  // index build
  std::string ib_db, ib_views, ib_model, ib_out;
  std::optional<double> ib_patch;
  std::optional<std::uint32_t> ib_ppv;
  auto* index_cmd = app.add_subcommand("index", "Patch index operations");
  index_cmd->require_subcommand(1);
  auto* index_build = index_cmd->add_subcommand("build", "Embed database patches with the shape tower");
  index_build->add_option("--db", ib_db, "Benchmark directory")->required();
  index_build->add_option("--views", ib_views, "View set JSON (default: computed from config)");
  index_build->add_option("--patch-size", ib_patch, "Patch side as a fraction of the render (default: config)");
  index_build->add_option("--patches-per-view", ib_ppv, "Patches per view (default: config)");
  index_build->add_option("--model", ib_model, "Model file")->required();
  index_build->add_option("--out", ib_out, "Output index file")->required();
  add_common(index_build, common);

  // train
  std::string tr_db, tr_out, tr_views, tr_history;
  std::optional<std::size_t> tr_epochs;
  bool tr_no_pose = false;
  auto* train_cmd = app.add_subcommand("train", "Train the embedding towers and the pose head");
  train_cmd->add_option("--db", tr_db, "Benchmark directory")->required();
  train_cmd->add_option("--out", tr_out, "Output model file")->required();
  train_cmd->add_option("--epochs", tr_epochs, "Embedding epochs (default: config)");
  train_cmd->add_option("--views", tr_views, "View set JSON (default: computed from config)");
  train_cmd->add_option("--history", tr_history, "Write the loss history CSV here");
  train_cmd->add_flag("--no-pose", tr_no_pose, "Skip the pose head");
  add_common(train_cmd, common);

  // retrieve
  std::string rt_index, rt_model, rt_query, rt_mask, rt_category;
  std::optional<std::size_t> rt_kq, rt_kr;
  bool rt_json = false;
  auto* retrieve = app.add_subcommand("retrieve", "Retrieve CAD shapes for a shaded query image");
  retrieve->add_option("--index", rt_index, "Index file")->required();
  retrieve->add_option("--model", rt_model, "Model file")->required();
  retrieve->add_option("--query", rt_query, "Query SHAD file")->required();
  retrieve->add_option("--mask", rt_mask, "Instance mask (SHAD or NMAP; default: the query's mask)");
  retrieve->add_option("--kq", rt_kq, "Query patches (default: config)");
  retrieve->add_option("--kr", rt_kr, "Retrieved patches per query patch (default: config)");
  retrieve->add_option("--category", rt_category, "Search only this category");
  retrieve->add_flag("--json", rt_json, "Print the full result as JSON");
  add_common(retrieve, common);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluation");
  eval->require_subcommand(1);
  std::string ev_db, ev_index, ev_model, ev_out;
  std::optional<std::size_t> ev_kq, ev_kr;
  bool ev_fscore = false;
  auto* eval_recall = eval->add_subcommand("recall", "Recall@k over the benchmark queries");
  eval_recall->add_option("--db", ev_db, "Benchmark directory")->required();
  eval_recall->add_option("--index", ev_index, "Index file (default: train and build in memory)");
  eval_recall->add_option("--model", ev_model, "Model file (required with --index)");
  eval_recall->add_option("--kq", ev_kq, "Query patches (default: config)");
  eval_recall->add_option("--kr", ev_kr, "Retrieved patches per query patch (default: config)");
  eval_recall->add_flag("--fscore", ev_fscore, "Also compute the top-1 mesh F-score per query");
  eval_recall->add_option("--out", ev_out, "Directory for report.json, recall.csv and queries.csv");
  add_common(eval_recall, common);

  std::string fs_pred, fs_gt;
  std::optional<double> fs_threshold;
  std::optional<std::size_t> fs_samples;
  auto* eval_fscore = eval->add_subcommand("fscore", "Mesh F-score between two OBJ files");
  eval_fscore->add_option("--pred", fs_pred, "Predicted mesh")->required();
  eval_fscore->add_option("--gt", fs_gt, "Ground-truth mesh")->required();
  eval_fscore->add_option("--threshold", fs_threshold, "Distance threshold (default: config)");
  eval_fscore->add_option("--samples", fs_samples, "Samples per mesh (default: config)");
  add_common(eval_fscore, common);

  std::string ep_db, ep_model;
  auto* eval_pose = eval->add_subcommand("pose", "Pose bin accuracy and rotation error over the benchmark queries");
  eval_pose->add_option("--db", ep_db, "Benchmark directory")->required();
  eval_pose->add_option("--model", ep_model, "Model file with a pose head")->required();
  add_common(eval_pose, common);

  // gradcheck
  GradcheckOptions gc_opt;
  double gc_tolerance = 1e-3;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--batches", gc_opt.batches, "Randomized batches per loss")->capture_default_str();
  gradcheck->add_option("--step", gc_opt.step, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc_tolerance, "Maximum relative error")->capture_default_str();
  add_common(gradcheck, common);

  // ablate
  std::string ab_db, ab_param, ab_values, ab_out;
  std::size_t ab_seeds = 3;
  auto* ablate = app.add_subcommand("ablate", "Sweep patch size, Kq or Kr and emit recall vs value as CSV");
  ablate->add_option("--db", ab_db, "Benchmark directory")->required();
  ablate->add_option("--param", ab_param, "patch-size, kq or kr")->required()->check(CLI::IsMember({"patch-size", "kq", "kr"}));
  ablate->add_option("--values", ab_values, "Comma-separated values")->required();
  ablate->add_option("--seeds", ab_seeds, "Runs averaged per value (seeds seed, seed+1, ...)")->capture_default_str();
  ablate->add_option("--out", ab_out, "CSV output file (default: stdout)");
  add_common(ablate, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", {{"code", "usage"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  }

  try {
    Config cfg = common.resolve();

    if (*synth) {
      cfg.seed = common.seed.value_or(cfg.seed);
      const Dataset d = materialize(generate_benchmark(synth_num, synth_leave_out, synth_views, cfg.seed));
      write_dataset(d, synth_out);
      print_json({{"shapes", d.bench.shapes.size()},
                  {"database", d.bench.database_ids().size()},
                  {"queries", d.bench.queries.size()},
                  {"manifest", (fs::path(synth_out) / "benchmark.json").string()}});
    } else if (*views) {
      if (views_samples) cfg.view_candidates = static_cast<std::uint32_t>(*views_samples);
      if (views_k) cfg.num_views = static_cast<std::uint32_t>(*views_k);
      require_valid(cfg);
      const ViewSet vs = views_for(cfg);
      write_text(views_out, viewset_to_json(vs).dump(2) + "\n");
      print_json({{"views", vs.size()}, {"out", views_out}});
    } else if (*render) {
      if (render_res) cfg.render_resolution = *render_res;
      require_valid(cfg);
      const TriMesh mesh = normalize_mesh(load_obj(render_mesh));
      const ViewSet vs = viewset_from_json(read_json(render_views));
      fs::create_directories(render_out);
      const Vec3 light(cfg.light_dir[0], cfg.light_dir[1], cfg.light_dir[2]);
      json written = json::array();
      for (std::uint32_t v = 0; v < vs.size(); ++v) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "view_%02u", v);
        const NormalMap nmap = rasterize(mesh, vs[v], cfg.render_resolution);
        const ShadedRender img = shade(nmap, vs[v], light, cfg.noise_sigma, derive_seed(cfg.seed, v));
        save_nmap(nmap, (fs::path(render_out) / (std::string(stem) + ".nmap")).string());
        save_shad(img, (fs::path(render_out) / (std::string(stem) + ".shad")).string());
        written.push_back(stem);
      }
      print_json({{"rendered", written}});
    } else if (*index_build) {
      if (ib_patch) cfg.patch_fraction = *ib_patch;
      if (ib_ppv) cfg.patches_per_view = *ib_ppv;
      require_valid(cfg);
      const Dataset d = load_dataset(ib_db);
      const ViewSet vs = ib_views.empty() ? views_for(cfg) : viewset_from_json(read_json(ib_views));
      const Model model = load_model(ib_model);
      const PatchIndex index =
          build_index(d.database_entries(), d.database_meshes(), vs, model.towers, cfg.patches_per_view, cfg);
      save_index(index, ib_out);
      print_json({{"records", index.size()}, {"shapes", index.shapes().size()}, {"out", ib_out}});
    } else if (*train_cmd) {
      if (tr_epochs) cfg.epochs = static_cast<std::uint32_t>(*tr_epochs);
      require_valid(cfg);
      const Dataset d = load_dataset(tr_db);
      const ViewSet vs = tr_views.empty() ? views_for(cfg) : viewset_from_json(read_json(tr_views));
      const CorpusBuild corpus = build_training_corpus(d, vs, cfg);
      const TrainResult result = train(corpus.corpus, EmbedConfig::from(cfg));
      Model model{result.params, std::nullopt, cfg};
      if (!tr_no_pose) model.pose = train_pose_model(d, cfg).model;
      save_model(model, tr_out);
      if (!tr_history.empty()) write_text(tr_history, history_csv(result.history));
      print_json({{"anchors", corpus.corpus.anchors.size()},
                  {"candidates", corpus.candidates.size()},
                  {"final_loss", result.history.empty() ? 0.0 : result.history.back().mean_loss},
                  {"pose", model.pose.has_value()},
                  {"out", tr_out}});
    } else if (*retrieve) {
      const PatchIndex index = load_index(rt_index);
      const Model model = load_model(rt_model);
      const ShadedRender query = load_shad(rt_query);
      const std::vector<std::uint8_t> mask = rt_mask.empty() ? query.mask : load_mask(rt_mask);
      const std::size_t kq = rt_kq.value_or(index.config().kq);
      const std::size_t kr = rt_kr.value_or(index.config().kr);
      const auto result = retrieve_shape(index, query, mask, model.towers, kq, kr, cfg.seed,
                                         rt_category.empty() ? std::nullopt : std::optional<std::string>(rt_category));
      if (rt_json) {
        json j = retrieval_to_json(result, index);
        if (model.pose) {
          PatchRect full;
          full.w = query.width;
          full.h = query.height;
          const auto f = image_patch_features(query, full, index.config().patch_resample, mask);
          if (f.size() == model.pose->head.feature_dim()) {
            j["pose"] = pose_to_json(predict_pose(model.pose->head, model.pose->bins, f));
          }
        }
        print_json(j);
      } else {
        for (const auto& r : result.ranking) {
          const ShapeEntry* s = index.find_shape(r.shape_id);
          std::cout << r.shape_id << "\t" << (s ? s->name : "") << "\t" << r.votes << "\t"
                    << format_double(r.aggregate_similarity) << "\n";
        }
      }
    } else if (*eval_recall) {
      if (ev_kq) cfg.kq = static_cast<std::uint32_t>(*ev_kq);
      if (ev_kr) cfg.kr = static_cast<std::uint32_t>(*ev_kr);
      require_valid(cfg);
      const Dataset d = load_dataset(ev_db);
      std::optional<PatchIndex> index;
      TowerParams towers;
      if (!ev_index.empty()) {
        if (ev_model.empty()) throw Error("invalid_argument", "--index requires --model");
        index = load_index(ev_index);
        towers = load_model(ev_model).towers;
      } else {
        RetrievalSystem sys = build_retrieval_system(d, cfg);
        index = std::move(sys.index);
        towers = std::move(sys.training.params);
      }
      const auto gt = proxy_ground_truth(d, cfg);
      const MetricsReport report =
          evaluate_retrieval(d, *index, towers, cfg, gt, {cfg.kq, cfg.kr, cfg.seed, true, ev_fscore});
      if (!ev_out.empty()) {
        write_text((fs::path(ev_out) / "report.json").string(), report_to_json(report).dump(2) + "\n");
        write_text((fs::path(ev_out) / "recall.csv").string(), report_recall_csv(report));
        write_text((fs::path(ev_out) / "queries.csv").string(), report_rows_csv(report));
      }
      print_json(report_to_json(report));
    } else if (*eval_fscore) {
      const TriMesh pred = normalize_mesh(load_obj(fs_pred));
      const TriMesh gt = normalize_mesh(load_obj(fs_gt));
      const FScore f = mesh_fscore_detail(pred, gt, fs_threshold.value_or(cfg.fscore_threshold),
                                          fs_samples.value_or(cfg.fscore_samples), cfg.seed);
      print_json({{"precision", f.precision}, {"recall", f.recall}, {"fscore", f.f}});
    } else if (*eval_pose) {
      const Dataset d = load_dataset(ep_db);
      const Model model = load_model(ep_model);
      if (!model.pose) throw Error("no_pose_head", "model file has no pose section");
      const PoseEvaluation ev = evaluate_pose(d, *model.pose, cfg);
      print_json({{"queries", ev.errors_deg.size()},
                  {"bin_accuracy", ev.bin_accuracy},
                  {"median_rotation_error_deg", ev.median_error_deg},
                  {"median_bin_radius_deg", ev.median_bin_radius_deg}});
    } else if (*gradcheck) {
      gc_opt.seed = cfg.seed;
      const GradcheckReport e = gradcheck_embedding(gc_opt, cfg.tau, cfg.c);
      const GradcheckReport p = gradcheck_pose(gc_opt, cfg.huber_delta);
      json out = json::array();
      for (const auto& r : {e, p}) {
        out.push_back({{"loss", r.name},
                       {"batches", r.batches},
                       {"partials", r.partials},
                       {"max_relative_error", r.max_rel_error},
                       {"passed", r.max_rel_error < gc_tolerance}});
      }
      print_json(out);
      if (e.max_rel_error >= gc_tolerance || p.max_rel_error >= gc_tolerance) return 1;
    } else if (*ablate) {
      require_valid(cfg);
      const Dataset d = load_dataset(ab_db);
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < ab_seeds; ++i) seeds.push_back(cfg.seed + i);
      const auto rows = run_ablation(d, cfg, ablation_param_from_string(ab_param), parse_values(ab_values), seeds);
      const std::string csv = ablation_csv(ab_param, rows);
      if (ab_out.empty()) {
        std::cout << csv;
      } else {
        write_text(ab_out, csv);
      }
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  }
  return 0;
}

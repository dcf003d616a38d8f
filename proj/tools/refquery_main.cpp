#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "refquery/metrics.hpp"
#include "refquery/selfcheck.hpp"
#include "refquery/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace refquery;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid JSON in ") + path + ": " + e.what());
  }
}

// Remaining tokens of the form --key=value become dotted-path config
// overrides; anything else is a usage error.
void apply_cli_overrides(json& cfg, const std::vector<std::string>& extras) {
  for (const auto& tok : extras) {
    if (tok.rfind("--", 0) != 0)
      throw ValidationError("unrecognized argument: " + tok + " (expected --key=value)");
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ValidationError("override " + tok + " must use --key=value form");
    apply_override(cfg, tok.substr(2, eq - 2), tok.substr(eq + 1));
  }
}

std::vector<std::string> find_manifests(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path m = entry.path() / "manifest.json";
    if (entry.is_directory() && fs::exists(m)) out.push_back(m.string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValidationError("no clip manifests under " + dir);
  return out;
}

std::vector<FeatureClip> load_clips(const std::string& dir) {
  std::vector<FeatureClip> clips;
  for (const auto& m : find_manifests(dir)) clips.push_back(load_clip(m));
  return clips;
}

int worker_threads(std::size_t jobs) {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("REFQUERY_THREADS")) {
    const int e = std::atoi(env);
    if (e > 0) n = e;
  }
  return std::max(1, std::min<int>(n, static_cast<int>(jobs)));
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("frames")) s.frames = j.at("frames").get<int>();
  if (j.contains("base_height")) s.base_h = j.at("base_height").get<int>();
  if (j.contains("base_width")) s.base_w = j.at("base_width").get<int>();
  if (j.contains("scales")) {
    s.scales.clear();
    for (const auto& sc : j.at("scales"))
      s.scales.push_back({sc.at("height").get<int>(), sc.at("width").get<int>(), sc.at("channels").get<int>()});
  }
  if (j.contains("text_channels")) s.text_channels = j.at("text_channels").get<int>();
  if (j.contains("text_tokens")) s.text_tokens = j.at("text_tokens").get<int>();
  if (j.contains("num_objects")) s.num_objects = j.at("num_objects").get<int>();
  if (j.contains("min_radius")) s.min_radius = j.at("min_radius").get<float>();
  if (j.contains("max_radius")) s.max_radius = j.at("max_radius").get<float>();
  if (j.contains("max_speed")) s.max_speed = j.at("max_speed").get<float>();
  if (j.contains("feature_noise")) s.feature_noise = j.at("feature_noise").get<float>();
  if (j.contains("target_index")) s.target_index = j.at("target_index").get<int>();
  return s;
}

int cmd_gen_synthetic(const std::string& spec_path, const std::string& out_dir) {
  const json spec_json = read_json_file(spec_path);
  const int clips = spec_json.value("clips", 0);
  if (clips < 1) throw ValidationError("gen-synthetic: spec must request at least one clip");
  SyntheticSpec base = synthetic_spec_from_json(spec_json);
  fs::create_directories(out_dir);
  for (int i = 0; i < clips; ++i) {
    SyntheticSpec s = base;
    s.seed = Rng::derive(base.seed, 1000 + static_cast<std::uint64_t>(i));
    FeatureClip clip = generate_synthetic(s);
    char name[16];
    std::snprintf(name, sizeof name, "clip%03d", i);
    clip.clip_id = name;
    save_clip(clip, (fs::path(out_dir) / name).string());
  }
  std::cout << "wrote " << clips << " clips to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume_path, const std::vector<std::string>& extras) {
  json cfg_json = to_json(RunConfig{});
  if (!config_path.empty()) cfg_json = read_json_file(config_path);
  int start_iteration = 0;
  CheckpointData resume_ckpt;
  if (!resume_path.empty()) {
    resume_ckpt = load_checkpoint(resume_path);
    json embedded = json::parse(resume_ckpt.config_json);
    start_iteration = embedded.value("iteration", 0);
    embedded.erase("iteration");
    if (!config_path.empty()) {
      // architecture comes from the checkpoint; a conflicting file is refused
      if (cfg_json.contains("model") && cfg_json.at("model") != embedded.at("model"))
        throw ValidationError("train: --config model section conflicts with the checkpoint");
    }
    cfg_json = embedded;
  }
  apply_cli_overrides(cfg_json, extras);
  RunConfig rc = run_config_from_json(cfg_json);
  rc.validate();

  auto clips = load_clips(data_dir);
  Model<float> model(rc.model, rc.seed);
  AdamWState adam;
  if (!resume_path.empty()) {
    load_model_params(resume_ckpt, model.params);
    load_adam_state(resume_ckpt, model.params, adam);
  }
  auto records = train_model(model, adam, start_iteration, clips, rc.loss, rc.seed);

  fs::create_directories(out_dir);
  const int final_iter = start_iteration + rc.loss.iterations;
  save_checkpoint((fs::path(out_dir) / "checkpoint.ckpt").string(), make_checkpoint(rc, model, adam, final_iter));
  io::write_text_atomic((fs::path(out_dir) / "loss.csv").string(), format_loss_csv(records));
  if (!records.empty()) {
    const auto& last = records.back().loss;
    std::cout << "trained " << records.size() << " iterations; final L_train " << last.l_train << " (L_v "
              << last.l_v << ", L_f " << last.l_f << ", L_sim " << last.l_sim << ")\n";
  }
  std::cout << "checkpoint: " << (fs::path(out_dir) / "checkpoint.ckpt").string() << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& clips_dir, const std::string& out_dir) {
  const CheckpointData ckpt = load_checkpoint(ckpt_path);
  json embedded;
  try {
    embedded = json::parse(ckpt.config_json);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint has malformed config: ") + e.what());
  }
  RunConfig rc = run_config_from_json(embedded);
  rc.model.validate();
  Model<float> model(rc.model, rc.seed);
  load_model_params(ckpt, model.params);

  const auto manifests = find_manifests(clips_dir);
  fs::create_directories(out_dir);
  const int nthreads = worker_threads(manifests.size());
  std::vector<std::string> errors(manifests.size());
  auto worker = [&](int tid) {
    for (std::size_t i = static_cast<std::size_t>(tid); i < manifests.size(); i += static_cast<std::size_t>(nthreads)) {
      try {
        FeatureClip clip = load_clip(manifests[i]);
        ClipPrediction pred = infer_clip(model, clip);
        save_prediction(pred, (fs::path(out_dir) / (clip.clip_id + ".json")).string());
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (nthreads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw NumericError("inference failed: " + e);
  std::cout << "wrote " << manifests.size() << " predictions to " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& gt_dir, const std::string& pred_dir, const std::string& out_dir) {
  const auto report = evaluate_dataset(find_manifests(gt_dir), pred_dir);
  const std::string table = format_metric_table(report);
  std::cout << table;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    io::write_text_atomic((fs::path(out_dir) / "metrics.csv").string(), format_metric_csv(report));
    io::write_text_atomic((fs::path(out_dir) / "metrics.txt").string(), table);
  }
  return 0;
}

int cmd_selfcheck(const std::string& inject_fault) {
  if (!inject_fault.empty()) fault_injection().op = inject_fault;
  const auto results = run_selfcheck(std::cout);
  fault_injection().op.clear();
  int failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  std::cout << (failed == 0 ? "selfcheck: all checks passed\n"
                            : "selfcheck: " + std::to_string(failed) + " check(s) failed\n");
  return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"referring video segmentation pipeline on frozen backbone features"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-synthetic", "generate synthetic feature clips");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "synthetic spec JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train on a clip directory");
  std::string train_config, train_data, train_out = "out", train_resume;
  train->add_option("--config", train_config, "run config JSON");
  train->add_option("--data", train_data, "clip directory")->required();
  train->add_option("--out", train_out, "artifact directory");
  train->add_option("--resume", train_resume, "checkpoint to continue from");
  train->allow_extras();

  auto* infer = app.add_subcommand("infer", "run inference with a checkpoint");
  std::string infer_ckpt, infer_clips, infer_out = "predictions";
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--clips", infer_clips, "clip directory")->required();
  infer->add_option("--out", infer_out, "prediction directory");

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  std::string eval_gt, eval_pred, eval_out;
  eval->add_option("--gt", eval_gt, "ground-truth clip directory")->required();
  eval->add_option("--predictions", eval_pred, "prediction directory")->required();
  eval->add_option("--out", eval_out, "directory for metrics.csv / metrics.txt");

  auto* selfcheck = app.add_subcommand("selfcheck", "gradient, assignment and metric oracles");
  std::string inject_fault;
  selfcheck->add_option("--inject-fault", inject_fault, "corrupt the adjoint of the named op (test hook)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_synthetic(gen_spec, gen_out);
    if (*train) return cmd_train(train_config, train_data, train_out, train_resume, train->remaining());
    if (*infer) return cmd_infer(infer_ckpt, infer_clips, infer_out);
    if (*eval) return cmd_eval(eval_gt, eval_pred, eval_out);
    if (*selfcheck) return cmd_selfcheck(inject_fault);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

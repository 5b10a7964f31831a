#pragma once

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpt/bench.hpp"
#include "dpt/config.hpp"
#include "dpt/gradcheck_suite.hpp"
#include "dpt/image_io.hpp"
#include "dpt/metrics.hpp"
#include "dpt/model.hpp"
#include "dpt/weights.hpp"

namespace dpt {

// Process exit codes.
enum ExitCode {
  kOk = 0,
  kConfigError = 2,
  kIoError = 3,
  kNumericError = 4,
  kGradcheckFailure = 5,
};

namespace cli_detail {

struct ConfigArgs {
  std::string preset_name;
  std::string config_path;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset_name, "preset name (base|large|hybrid|toy|toy-seg|toy-hybrid)");
    cmd->add_option("--config", config_path, "JSON config file");
  }

  DptConfig resolve(const std::string& fallback = "toy") const {
    check_config(preset_name.empty() || config_path.empty(),
                 "pass either --preset or --config, not both");
    if (!config_path.empty()) return load_config_file(config_path);
    return preset(preset_name.empty() ? fallback : preset_name);
  }
};

inline std::vector<std::size_t> parse_sizes(const std::vector<std::string>& args) {
  std::vector<std::size_t> sizes;
  for (const auto& arg : args) {
    std::stringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      sizes.push_back(static_cast<std::size_t>(std::stoul(item)));
    }
  }
  check_config(!sizes.empty(), "no sizes given");
  return sizes;
}

inline Tensor<double> image_as_map(const Image& img, const std::string& what) {
  check_config(img.channels == 1, what + ": expected a single-channel map");
  Tensor<double> t({img.height, img.width});
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < img.data.size(); ++i) d[i] = img.data[i];
  return t;
}

inline std::vector<int> image_as_labels(const Image& img, const std::string& what) {
  check_config(img.channels == 1, what + ": expected a single-channel label map");
  std::vector<int> labels(img.data.size());
  double scale = img.source_maxval > 0 ? img.source_maxval : 1;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    labels[i] = static_cast<int>(std::lround(img.data[i] * scale));
  return labels;
}

inline std::vector<OrdinalPair> load_ordinal_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("pairs: cannot open '" + path + "'");
  std::vector<OrdinalPair> pairs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    OrdinalPair p;
    std::string rel;
    if (!(ss >> p.ay >> p.ax >> p.by >> p.bx >> rel))
      throw IoError("pairs: malformed line '" + line + "' (want: ay ax by bx a|b)");
    if (rel == "a")
      p.relation = OrdinalPair::Relation::ACloser;
    else if (rel == "b")
      p.relation = OrdinalPair::Relation::BCloser;
    else
      throw IoError("pairs: relation must be 'a' or 'b', got '" + rel + "'");
    pairs.push_back(p);
  }
  return pairs;
}

inline void emit_report(const nlohmann::json& j, const std::string& json_path) {
  std::cout << to_kv_text(j);
  if (!json_path.empty()) {
    std::ofstream f(json_path);
    if (!f) throw IoError("report: cannot open '" + json_path + "'");
    f << j.dump(2) << "\n";
  }
}

inline int cmd_describe(const ConfigArgs& cfg_args, std::size_t size) {
  DptConfig cfg = cfg_args.resolve("base");
  auto plan = plan_parameters(cfg);
  std::cout << "config: " << cfg.name << "\n";
  std::cout << "input: " << size << "x" << size << "\n";
  for (const auto& stage : describe_shapes(cfg, size, size))
    std::cout << "  " << stage.name << ": " << shape_str(stage.shape) << "\n";
  std::size_t learn = learnable_count(plan);
  std::size_t buf = buffer_count(plan);
  std::cout << "parameters: " << learn << " (" << std::fixed << std::setprecision(2)
            << learn / 1e6 << "M)\n";
  if (buf) std::cout << "norm-statistic buffers: " << buf << "\n";
  std::cout << "records: " << plan.size() << "\n";
  std::cout << "forward_gflops: " << std::setprecision(3)
            << estimate_flops(cfg, size, size) / 1e9 << "\n";
  return kOk;
}

inline int cmd_infer(const ConfigArgs& cfg_args, const std::string& weights_path,
                     std::uint64_t seed, const std::string& input_path,
                     const std::string& output_path, bool auto_pad) {
  DptConfig cfg = cfg_args.resolve("toy");
  DptModel<float> model = weights_path.empty()
                              ? build_model<float>(cfg, seed)
                              : load_weights<float>(WeightArchive::load(weights_path), cfg);
  Image img = read_image(input_path);
  auto input = image_to_tensor<float>(img, cfg.norm_mean, cfg.norm_std);
  std::size_t orig_h = input.extent(1), orig_w = input.extent(2);
  if (orig_h % 32 != 0 || orig_w % 32 != 0) {
    if (!auto_pad)
      throw ConfigError("infer: input " + std::to_string(orig_h) + "x" +
                        std::to_string(orig_w) +
                        " not divisible by 32 (use --auto-pad to reflect-pad)");
    input = reflect_pad_to_multiple(input, 32, orig_h, orig_w);
  }
  auto out = forward(model, input);
  auto pred = crop_to(out.prediction, orig_h, orig_w);
  if (cfg.head == HeadKind::Depth) {
    write_image(output_path, tensor_to_image(pred));
    std::cout << "wrote depth map " << orig_h << "x" << orig_w << " to " << output_path
              << "\n";
  } else {
    // Per-pixel argmax labels plus the raw logits. PGM outputs quantize over
    // maxval 255, raw outputs carry the class ids directly.
    std::size_t classes = pred.extent(0), plane = orig_h * orig_w;
    bool as_pnm = output_path.size() >= 4 &&
                  output_path.substr(output_path.size() - 4) == ".pgm";
    check_config(!as_pnm || classes <= 256, "infer: more than 256 classes need a raw output");
    Image labels;
    labels.channels = 1;
    labels.height = orig_h;
    labels.width = orig_w;
    labels.data.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (pred.at(c * plane + i) > pred.at(best * plane + i)) best = c;
      labels.data[i] = as_pnm ? static_cast<float>(best) / 255.0f : static_cast<float>(best);
    }
    write_image(output_path, labels);
    write_image(output_path + ".logits.dptr", tensor_to_image(pred));
    std::cout << "wrote argmax labels to " << output_path << " and logits to " << output_path
              << ".logits.dptr\n";
  }
  return kOk;
}

inline int cmd_convert(const std::string& input_path, const std::string& output_path,
                       bool sixteen_bit) {
  Image img = read_image(input_path);
  write_image(output_path, img, sixteen_bit);
  std::cout << "converted " << input_path << " (" << img.channels << "x" << img.height << "x"
            << img.width << ") to " << output_path << "\n";
  return kOk;
}

inline int cmd_gradcheck(const ConfigArgs& cfg_args, double h, double tol, std::size_t samples,
                         std::size_t image_hw) {
  DptConfig cfg = cfg_args.resolve("toy");
  auto guard_plan = plan_parameters(cfg);
  std::size_t n_params = learnable_count(guard_plan);
  check_config(n_params <= 1000000,
               "gradcheck: config has " + std::to_string(n_params) +
                   " parameters, the toy guard allows at most 1e6");
  bool all_pass = true;
  auto report = [&](const GradcheckSuiteResult& res) {
    for (const auto& e : res.entries)
      std::cout << "  " << e.name << ": " << e.report.summary() << "\n";
    all_pass = all_pass && res.all_pass;
  };
  std::cout << "primitive ops (h=" << h << ", tol=" << tol << "):\n";
  report(run_primitive_gradchecks(h, tol));

  DptConfig depth_cfg = cfg;
  depth_cfg.head = HeadKind::Depth;
  DptConfig seg_cfg = cfg;
  seg_cfg.head = HeadKind::Segmentation;
  if (cfg.head != HeadKind::Segmentation) seg_cfg.num_classes = 4;
  seg_cfg.validate();
  std::size_t stride = 1;
  if (samples != 0) {
    std::size_t depth_params = learnable_count(plan_parameters(depth_cfg));
    stride = std::max<std::size_t>(1, depth_params / samples);
  }
  std::cout << "end-to-end toy losses (parameter element stride " << stride << "):\n";
  report(run_end_to_end_gradchecks(depth_cfg, seg_cfg, image_hw, stride, h, tol));
  std::cout << (all_pass ? "gradcheck: PASS" : "gradcheck: FAIL") << "\n";
  return all_pass ? kOk : kGradcheckFailure;
}

inline int cmd_bench(const ConfigArgs& cfg_args, const std::vector<std::string>& size_args,
                     int runs, int warmup, std::uint64_t seed,
                     const std::string& weights_path, const std::vector<std::string>& gt_paths) {
  DptConfig cfg = cfg_args.resolve("toy");
  auto sizes = parse_sizes(size_args.empty() ? std::vector<std::string>{"384"} : size_args);
  for (std::size_t s : sizes)
    check_config(s % 32 == 0, "bench: size " + std::to_string(s) + " not divisible by 32");
  DptModel<float> model = weights_path.empty()
                              ? build_model<float>(cfg, seed)
                              : load_weights<float>(WeightArchive::load(weights_path), cfg);
  std::cout << "config: " << cfg.name << ", parameters: "
            << learnable_count(plan_parameters(cfg)) << "\n";
  std::vector<BenchResult> rows;
  for (std::size_t s : sizes) rows.push_back(bench_forward(model, s, s, runs, warmup, seed));
  std::cout << bench_table(rows);
  if (!gt_paths.empty()) {
    check_config(gt_paths.size() == sizes.size(),
                 "bench: need exactly one --gt map per size for the resolution sweep");
    std::vector<Tensor<double>> gts;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      auto map = image_as_map(read_image(gt_paths[i]), gt_paths[i]);
      gts.push_back(std::move(map));
    }
    std::cout << "relative performance vs " << sizes.front() << "x" << sizes.front()
              << " (aligned abs_rel, lower is better):\n";
    std::cout << sweep_table(resolution_sweep(model, sizes, gts, seed));
  }
  return kOk;
}

inline int cmd_eval_depth(const std::string& pred_path, const std::string& gt_path,
                          const std::string& mask_path, bool aligned, bool gt_inverse,
                          const std::string& pairs_path, double margin,
                          const std::string& json_path) {
  DepthEvalPair pair;
  pair.prediction = image_as_map(read_image(pred_path), pred_path);
  pair.ground_truth = image_as_map(read_image(gt_path), gt_path);
  pair.gt_is_inverse_depth = gt_inverse;
  if (mask_path.empty()) {
    pair.valid_mask.assign(pair.prediction.numel(), 1);
  } else {
    auto mask_img = read_image(mask_path);
    check_config(mask_img.data.size() == pair.prediction.numel(),
                 "eval: mask size mismatch");
    pair.valid_mask.resize(mask_img.data.size());
    for (std::size_t i = 0; i < mask_img.data.size(); ++i)
      pair.valid_mask[i] = mask_img.data[i] != 0.0f;
  }
  auto m = depth_metrics(pair, aligned);
  nlohmann::json j = to_json(m);
  j["aligned"] = aligned;
  if (aligned) {
    auto fit = align_affine_lsq(pair);
    j["align_scale"] = fit.scale;
    j["align_shift"] = fit.shift;
  }
  if (!pairs_path.empty()) {
    auto pairs = load_ordinal_pairs(pairs_path);
    j["whdr"] = whdr(pair.prediction, pairs, margin);
    j["whdr_pairs"] = pairs.size();
  }
  emit_report(j, json_path);
  return kOk;
}

inline int cmd_eval_seg(const std::string& pred_path, const std::string& gt_path,
                        std::size_t classes, int ignore_label, const std::string& json_path) {
  auto pred_img = read_image(pred_path);
  auto gt_img = read_image(gt_path);
  auto pred = image_as_labels(pred_img, pred_path);
  auto gt = image_as_labels(gt_img, gt_path);
  check_config(pred.size() == gt.size(), "eval: prediction/ground-truth size mismatch");
  auto m = seg_metrics(pred, gt, classes, ignore_label);
  emit_report(to_json(m), json_path);
  return kOk;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv) {
  using namespace cli_detail;
  CLI::App app{"dense prediction transformer toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  bool check_finite = false;
  app.add_option("--threads", threads, "worker threads (DPT_THREADS env is the fallback)");
  app.add_flag("--check-finite", check_finite, "scan every op output for NaN/Inf");

  auto* describe = app.add_subcommand("describe", "shapes and parameter counts");
  ConfigArgs describe_cfg;
  describe_cfg.attach(describe);
  std::size_t describe_size = 384;
  describe->add_option("--size", describe_size, "input size (square)");

  auto* infer = app.add_subcommand("infer", "run a forward pass on an image");
  ConfigArgs infer_cfg;
  infer_cfg.attach(infer);
  std::string infer_weights, infer_input, infer_output;
  std::uint64_t infer_seed = 0;
  bool auto_pad = false;
  infer->add_option("--weights", infer_weights, "weight archive (DPTW)");
  infer->add_option("--seed", infer_seed, "random-init seed when no --weights given");
  infer->add_option("--input", infer_input, "input image (PGM/PPM/DPTR)")->required();
  infer->add_option("--output", infer_output, "output path")->required();
  infer->add_flag("--auto-pad", auto_pad, "reflect-pad to a multiple of 32 and crop back");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  ConfigArgs gc_cfg;
  gc_cfg.attach(gradcheck_cmd);
  double gc_h = 1e-5, gc_tol = 1e-4;
  std::size_t gc_samples = 200, gc_image = 32;
  gradcheck_cmd->add_option("--step", gc_h, "finite-difference step");
  gradcheck_cmd->add_option("--tol", gc_tol, "relative-error tolerance");
  gradcheck_cmd->add_option("--samples", gc_samples,
                            "parameter elements to spot-check end to end (0 = all)");
  gradcheck_cmd->add_option("--image-size", gc_image, "end-to-end input size");

  auto* bench = app.add_subcommand("bench", "forward-pass latency");
  ConfigArgs bench_cfg;
  bench_cfg.attach(bench);
  std::vector<std::string> bench_sizes, bench_gts;
  int bench_runs = 400, bench_warmup = 10;
  std::uint64_t bench_seed = 0;
  std::string bench_weights;
  bench->add_option("--size", bench_sizes, "input sizes (repeatable or comma-separated)");
  bench->add_option("--runs", bench_runs, "timed runs per size (default 400)");
  bench->add_option("--warmup", bench_warmup, "untimed warmup runs");
  bench->add_option("--seed", bench_seed, "input/weight seed");
  bench->add_option("--weights", bench_weights, "weight archive");
  bench->add_option("--gt", bench_gts,
                    "inverse-depth ground truth per size; adds the resolution sweep table");

  auto* eval = app.add_subcommand("eval", "metrics on prediction/ground-truth files");
  std::string eval_task = "depth", eval_pred, eval_gt, eval_mask, eval_pairs, eval_json;
  bool eval_aligned = false, eval_gt_inverse = false;
  double eval_margin = 0.03;
  std::size_t eval_classes = 0;
  int eval_ignore = -1;
  eval->add_option("--task", eval_task, "depth|seg")->check(CLI::IsMember({"depth", "seg"}));
  eval->add_option("--pred", eval_pred, "prediction map")->required();
  eval->add_option("--gt", eval_gt, "ground-truth map")->required();
  eval->add_option("--mask", eval_mask, "validity mask (nonzero = valid)");
  eval->add_flag("--aligned", eval_aligned, "least-squares align in inverse depth first");
  eval->add_flag("--gt-inverse", eval_gt_inverse, "ground truth is inverse depth");
  eval->add_option("--pairs", eval_pairs, "ordinal pair file, adds WHDR");
  eval->add_option("--margin", eval_margin, "WHDR ratio margin");
  eval->add_option("--classes", eval_classes, "number of classes (seg)");
  eval->add_option("--ignore", eval_ignore, "ignored label (seg)");
  eval->add_option("--json", eval_json, "also write the report as JSON");

  auto* convert = app.add_subcommand("convert", "convert between PGM/PPM and raw float maps");
  std::string conv_in, conv_out;
  bool conv_16 = false;
  convert->add_option("--input", conv_in, "input image")->required();
  convert->add_option("--output", conv_out, "output image; extension picks the format")
      ->required();
  convert->add_flag("--16bit", conv_16, "write 16-bit PNM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (threads > 0) set_thread_count(threads);
    set_finite_checks(check_finite);
    if (*describe) return cmd_describe(describe_cfg, describe_size);
    if (*infer)
      return cmd_infer(infer_cfg, infer_weights, infer_seed, infer_input, infer_output,
                       auto_pad);
    if (*gradcheck_cmd) return cmd_gradcheck(gc_cfg, gc_h, gc_tol, gc_samples, gc_image);
    if (*bench)
      return cmd_bench(bench_cfg, bench_sizes, bench_runs, bench_warmup, bench_seed,
                       bench_weights, bench_gts);
    if (*eval) {
      if (eval_task == "seg") {
        check_config(eval_classes >= 2, "eval seg: --classes is required");
        return cmd_eval_seg(eval_pred, eval_gt, eval_classes, eval_ignore, eval_json);
      }
      return cmd_eval_depth(eval_pred, eval_gt, eval_mask, eval_aligned, eval_gt_inverse,
                            eval_pairs, eval_margin, eval_json);
    }
    if (*convert) return cmd_convert(conv_in, conv_out, conv_16);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericError;
  }
  return kConfigError;
}

}  // namespace dpt

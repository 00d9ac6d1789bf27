// restormixer: train / infer / eval / verify / count.
// Exit codes: 0 success, 1 verification or evaluation failure, 2 usage error, 3 I/O error.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rmx/checkpoint.hpp"
#include "rmx/data.hpp"
#include "rmx/image.hpp"
#include "rmx/trainer.hpp"
#include "rmx/verify.hpp"

namespace fs = std::filesystem;
using namespace rmx;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, io = 3 };

struct UsageError : Error {
  using Error::Error;
};

void print_config(const std::string& text) {
  std::cout << "# resolved config\n" << text << "# end config\n" << std::flush;
}

// file entries first, then --set overrides in order
std::vector<ConfigEntry> gather_config(const std::string& path, const std::vector<std::string>& sets) {
  std::vector<ConfigEntry> entries;
  if (!path.empty()) entries = read_config_file(path);
  std::string text;
  for (const auto& s : sets) {
    if (s.find('=') == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    text += s + "\n";
  }
  for (auto& e : parse_config(text, "--set")) entries.push_back(std::move(e));
  return entries;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(precision) << v;
  return o.str();
}

ColorSpace eval_space(bool ycbcr, bool full) {
  if (full) return ColorSpace::ycbcr;
  return ycbcr ? ColorSpace::y : ColorSpace::rgb;
}

const char* space_text(ColorSpace s) { return s == ColorSpace::rgb ? "rgb" : s == ColorSpace::y ? "y" : "ycbcr"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid CNN / state-space / window-attention image restoration"};
  app.require_subcommand(1, 1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints plus metrics.jsonl");
  std::string config_path, data_spec, out_dir, eval_spec, manifest, resume;
  std::vector<std::string> sets;
  bool init_only = false, zero_heads = false;
  train_cmd->add_option("--config", config_path, "config file (key = value)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_spec, "dataset directory or synth:TAG:COUNT:SIZE[:SEED[:FIRST]]");
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--eval-data", eval_spec, "held-out dataset (directory or synth spec)");
  train_cmd->add_option("--manifest", manifest, "manifest restricting the training directory");
  train_cmd->add_option("--resume", resume, "continue from a training checkpoint");
  train_cmd->add_option("--set", sets, "override a config key: --set key=value")->allow_extra_args(false);
  train_cmd->add_flag("--init-only", init_only, "write the initialized model to OUT/init.ckpt and stop");
  train_cmd->add_flag("--zero-heads", zero_heads, "with --init-only: zero the prediction heads (identity restorer)");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "restore PNG images with a checkpoint");
  std::string ckpt_path, input_path, output_dir;
  infer_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  infer_cmd->add_option("--input", input_path, "PNG file or directory of PNGs")->required();
  infer_cmd->add_option("--output", output_dir, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a paired dataset");
  std::string eval_data;
  bool ycbcr = false, ycbcr_full = false;
  double min_psnr = -INFINITY;
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory or synth spec")->required();
  eval_cmd->add_option("--manifest", manifest, "manifest restricting the dataset");
  eval_cmd->add_flag("--ycbcr", ycbcr, "deraining protocol: metrics on the Y channel of YCbCr");
  eval_cmd->add_flag("--ycbcr-full", ycbcr_full, "metrics on all three YCbCr planes");
  eval_cmd->add_option("--min-psnr", min_psnr, "exit 1 when the mean PSNR falls below this value");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "gradient checks, oracles, round trips, metric anchors");
  std::string suite = "all";
  verify_cmd->add_option("--suite", suite, "grads | oracles | all")
      ->check(CLI::IsMember({"grads", "oracles", "all"}));

  // count
  auto* count_cmd = app.add_subcommand("count", "itemized parameter and FLOP report");
  std::string hw = "256x256";
  int flops_per_mac = 1;
  count_cmd->add_option("--config", config_path, "config file")->check(CLI::ExistingFile);
  count_cmd->add_option("--hw", hw, "input extent HxW");
  count_cmd->add_option("--flops-per-mac", flops_per_mac, "FLOPs charged per multiply-accumulate (1 or 2)")->check(CLI::Range(1, 2));
  count_cmd->add_option("--set", sets, "override a config key: --set key=value")->allow_extra_args(false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::usage;
  }

  try {
    if (*train_cmd) {
      RunConfig rc = RunConfig::parse(gather_config(config_path, sets));
      std::ostringstream resolved;
      resolved << rc.to_text() << "data = " << data_spec << "\neval_data = " << eval_spec << "\nout = " << out_dir
               << "\nresume = " << resume << '\n';
      print_config(resolved.str());
      fs::create_directories(out_dir);
      if (init_only) {
        Model m(rc.model);
        if (zero_heads) m.zero_heads();
        write_checkpoint((fs::path(out_dir) / "init.ckpt").string(), capture_model(m));
        std::cout << "wrote " << (fs::path(out_dir) / "init.ckpt").string() << '\n';
        return Exit::ok;
      }
      if (data_spec.empty()) throw UsageError("train: --data is required");
      auto data = open_dataset(data_spec, manifest);
      std::unique_ptr<Dataset> held;
      if (!eval_spec.empty()) held = open_dataset(eval_spec);
      Model model(rc.model);
      TrainState state;
      if (!resume.empty()) {
        const auto ck = read_checkpoint(resume);
        if (ModelConfig::parse(ck.config_text) != rc.model)
          throw UsageError("--resume checkpoint was written with a different model config");
        state = restore_training(model, ck);
        std::cout << "resuming at step " << state.step << '\n';
      }
      TrainOptions opt;
      opt.out_dir = out_dir;
      const auto t0 = std::chrono::steady_clock::now();
      auto result = train(model, *data, held.get(), rc.train, state, opt);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "trained " << result.losses.size() << " steps in " << fmt(secs, 1) << " s\n";
      if (result.last_eval) {
        std::cout << "held-out PSNR " << fmt(result.last_eval->mean_psnr) << " dB (input "
                  << fmt(result.last_eval->mean_input_psnr) << " dB), SSIM " << fmt(result.last_eval->mean_ssim)
                  << '\n';
      }
      return Exit::ok;
    }

    if (*infer_cmd) {
      const auto ck = read_checkpoint(ckpt_path);
      Model model = load_model(ck);
      std::ostringstream resolved;
      resolved << ck.config_text << "ckpt = " << ckpt_path << "\ninput = " << input_path << "\noutput = " << output_dir
               << '\n';
      print_config(resolved.str());
      std::vector<fs::path> inputs;
      if (fs::is_directory(input_path)) {
        for (const auto& e : fs::directory_iterator(input_path))
          if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
        std::sort(inputs.begin(), inputs.end());
      } else {
        inputs.emplace_back(input_path);
      }
      if (inputs.empty()) throw IoError("no PNG images under '" + input_path + "'");
      fs::create_directories(output_dir);
      for (const auto& p : inputs) {
        const Tensor img = load_image(p.string());
        const Tensor out =
            model.forward(img.reshaped({1, 3, img.dim(1), img.dim(2)}), NormMode::eval).final();
        const auto dst = fs::path(output_dir) / p.filename();
        save_image(out, dst.string());
        std::cout << p.string() << " -> " << dst.string() << '\n';
      }
      return Exit::ok;
    }

    if (*eval_cmd) {
      const auto ck = read_checkpoint(ckpt_path);
      Model model = load_model(ck);
      const auto space = eval_space(ycbcr, ycbcr_full);
      std::ostringstream resolved;
      resolved << ck.config_text << "ckpt = " << ckpt_path << "\ndata = " << eval_data
               << "\nmetric_space = " << space_text(space) << '\n';
      print_config(resolved.str());
      auto data = open_dataset(eval_data, manifest);
      const auto r = evaluate(model, *data, space);
      for (const auto& s : r.images) {
        std::cout << s.name << "  psnr " << fmt(s.psnr) << "  ssim " << fmt(s.ssim);
        if (!std::isnan(s.input_psnr)) std::cout << "  input_psnr " << fmt(s.input_psnr);
        std::cout << '\n';
      }
      std::cout << "mean psnr " << fmt(r.mean_psnr) << " ssim " << fmt(r.mean_ssim);
      if (!std::isnan(r.mean_input_psnr)) std::cout << " (input psnr " << fmt(r.mean_input_psnr) << ")";
      std::cout << '\n';
      if (!std::isfinite(r.mean_ssim) || r.mean_psnr < min_psnr) {
        std::cerr << "evaluation failed: mean PSNR " << r.mean_psnr << " below " << min_psnr << '\n';
        return Exit::failure;
      }
      return Exit::ok;
    }

    if (*verify_cmd) {
      print_config("suite = " + suite + "\n");
      const auto which = suite == "grads" ? VerifySuite::grads : suite == "oracles" ? VerifySuite::oracles
                                                                                    : VerifySuite::all;
      int failed = 0;
      run_verify(which, [&](const CheckResult& r) {
        failed += !r.passed;
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.suite << '/' << r.name << "  error " << r.value
                  << " (tolerance " << r.tolerance << ")  " << fmt(r.seconds, 2) << " s  " << r.detail << std::endl;
      });
      std::cout << (failed ? std::to_string(failed) + " check(s) failed" : std::string("all checks passed")) << '\n';
      return failed ? Exit::failure : Exit::ok;
    }

    if (*count_cmd) {
      RunConfig rc = RunConfig::parse(gather_config(config_path, sets));
      std::int64_t h = 0, w = 0;
      char x = 0;
      std::istringstream in(hw);
      if (!(in >> h >> x >> w) || x != 'x' || h < 1 || w < 1 || !in.eof())
        throw UsageError("--hw expects HxW, got '" + hw + "'");
      print_config(rc.model.to_text() + "hw = " + hw + "\nflops_per_mac = " + std::to_string(flops_per_mac) + "\n");
      Model model(rc.model);
      const auto report = model.cost(h, w);
      std::cout << report.to_text(flops_per_mac);
      const auto [hp, wp] = model.padded_extent(h, w);
      std::cout << "padded extent " << hp << "x" << wp << '\n';
      return Exit::ok;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return Exit::usage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return Exit::usage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return Exit::io;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return Exit::io;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return Exit::failure;
  }
  return Exit::usage;
}

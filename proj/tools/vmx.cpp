#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "vmx/vmx.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void print_metrics(const vmx::DatasetMetrics& m, const std::string& report_path) {
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw vmx::IoError("cannot open " + report_path + " for writing");
    vmx::write_report(out, m);
  }
  vmx::write_report(std::cout, m);
}

vmx::TrainConfig config_or_default(const std::string& path) {
  return path.empty() ? vmx::TrainConfig{} : vmx::load_train_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VMamba-X PET/CT segmentation toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic phantom dataset container");
  std::uint64_t gen_seed = 7;
  std::size_t gen_count = 250, gen_size = 64;
  std::string gen_out;
  std::string gen_masks;
  gen->add_option("--seed", gen_seed, "Phantom seed");
  gen->add_option("--count", gen_count, "Number of pairs");
  gen->add_option("--size", gen_size, "Image side in pixels");
  gen->add_option("--out", gen_out, "Output container path")->required();
  gen->add_option("--mask-dir", gen_masks, "Also export ground-truth masks as PGM files here");

  auto* tr = app.add_subcommand("train", "Train from a config file");
  std::string tr_config, tr_data, tr_ckpt, tr_log;
  tr->add_option("--config", tr_config, "Config file (key = value)")->required();
  tr->add_option("--data", tr_data, "Override the dataset path");
  tr->add_option("--ckpt", tr_ckpt, "Override the checkpoint path");
  tr->add_option("--log", tr_log, "Also append epoch lines to this file");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "val", ev_report;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset container")->required();
  ev->add_option("--split", ev_split, "Samples to score: val (last 20%), train or all")
      ->check(CLI::IsMember({"val", "train", "all"}));
  ev->add_option("--report", ev_report, "Write the metric report to this file as well");

  auto* pr = app.add_subcommand("predict", "Write predicted masks as PGM files");
  std::string pr_ckpt, pr_data, pr_out;
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint path")->required();
  pr->add_option("--data", pr_data, "Dataset container")->required();
  pr->add_option("--out", pr_out, "Output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check on the micro model");
  std::size_t gc_probes = 200;
  double gc_tol = 1e-4;
  gc->add_option("--probes", gc_probes, "Minimum number of sampled parameters");
  gc->add_option("--tol", gc_tol, "Maximum accepted relative error");

  auto* ct = app.add_subcommand("count", "Print parameter and FLOP counts");
  std::string ct_config;
  ct->add_option("--config", ct_config, "Config file; defaults apply when omitted");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      vmx::PhantomSpec spec;
      spec.rng_seed = gen_seed;
      spec.size = gen_size;
      const auto pairs = vmx::generate_dataset(spec, gen_count);
      vmx::dataset_write(pairs, gen_out);
      if (!gen_masks.empty()) {
        std::filesystem::create_directories(gen_masks);
        for (const auto& p : pairs) vmx::write_pgm(p.mask, gen_masks + "/" + p.id + ".pgm");
      }
      std::cout << "wrote " << pairs.size() << " pairs (" << gen_size << "x" << gen_size << ") to " << gen_out << "\n";
    } else if (*tr) {
      vmx::TrainConfig cfg = vmx::load_train_config(tr_config);
      if (!tr_data.empty()) cfg.data_path = tr_data;
      if (!tr_ckpt.empty()) cfg.checkpoint_path = tr_ckpt;
      if (cfg.data_path.empty()) throw vmx::ConfigError("no dataset: set 'data' in the config or pass --data");
      const auto data = vmx::dataset_read(cfg.data_path);
      vmx::VMambaX model = vmx::VMambaX::make(cfg.model);
      std::cout << "params " << vmx::count_params(model) << " flops " << vmx::count_flops(model, cfg.model.input_size)
                << " train " << vmx::split_dataset(data.size()).train.size() << " val "
                << vmx::split_dataset(data.size()).val.size() << "\n";
      std::ofstream log_file;
      if (!tr_log.empty()) log_file.open(tr_log, std::ios::app);
      struct Tee : std::streambuf {
        std::streambuf *a, *b;
        int overflow(int c) override {
          if (c == EOF) return 0;
          a->sputc(static_cast<char>(c));
          if (b) b->sputc(static_cast<char>(c));
          return c;
        }
        int sync() override {
          a->pubsync();
          if (b) b->pubsync();
          return 0;
        }
      } tee;
      tee.a = std::cout.rdbuf();
      tee.b = log_file.is_open() ? log_file.rdbuf() : nullptr;
      std::ostream log(&tee);
      vmx::TrainOptions opt;
      opt.log = &log;
      const auto result = vmx::train(model, cfg, data, opt);
      log << "best val_dice " << vmx::format_metric(result.best_val_dice) << " at epoch " << result.best_epoch
          << " checkpoint " << cfg.checkpoint_path << std::endl;
    } else if (*ev) {
      vmx::VMambaX model = vmx::load_model(ev_ckpt);
      const auto data = vmx::dataset_read(ev_data);
      const auto split = vmx::split_dataset(data.size());
      std::vector<std::size_t> idx;
      if (ev_split == "val") idx = split.val;
      if (ev_split == "train") idx = split.train;
      if (ev_split == "all") {
        idx = split.train;
        idx.insert(idx.end(), split.val.begin(), split.val.end());
      }
      print_metrics(vmx::evaluate_dataset(model, data, idx), ev_report);
    } else if (*pr) {
      vmx::VMambaX model = vmx::load_model(pr_ckpt);
      const auto data = vmx::dataset_read(pr_data);
      std::vector<std::size_t> idx(data.size());
      std::iota(idx.begin(), idx.end(), 0);
      const auto masks = vmx::predict_masks(model, data, idx);
      std::filesystem::create_directories(pr_out);
      for (std::size_t i = 0; i < masks.size(); ++i) vmx::write_pgm(masks[i], pr_out + "/" + data[i].id + ".pgm");
      std::cout << "wrote " << masks.size() << " masks to " << pr_out << "\n";
    } else if (*gc) {
      vmx::GradcheckOptions opt;
      opt.min_probes = gc_probes;
      const auto report = vmx::gradcheck(opt);
      for (const auto& [group, err] : report.group_max) std::cout << "group " << group << " max_rel_err " << err << "\n";
      std::cout << "probes " << report.probes.size() << " tensors " << report.tensors_covered << " max_rel_err "
                << report.max_rel_error << " worst " << report.worst << "\n";
      if (!(report.max_rel_error < gc_tol)) {
        std::cerr << "gradcheck failed: " << report.max_rel_error << " >= " << gc_tol << "\n";
        return kNumerical;
      }
    } else if (*ct) {
      const vmx::TrainConfig cfg = config_or_default(ct_config);
      vmx::VMambaX model = vmx::VMambaX::make(cfg.model);
      std::cout << "params " << vmx::count_params(model) << "\n";
      for (const auto& [group, n] : vmx::parameter_groups(model)) std::cout << "  " << group << " " << n << "\n";
      std::cout << "flops " << vmx::count_flops(model, cfg.model.input_size) << "\n";
    }
  } catch (const vmx::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const vmx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const vmx::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const vmx::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

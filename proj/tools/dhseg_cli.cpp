// Command-line front end: train, predict, evaluate, inspect-arch, plus
// init-weights and show-config helpers.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dhseg/pipelines.hpp"

namespace fs = std::filesystem;
using namespace dhseg;

namespace {

struct TaskArgs {
  std::string task;
  std::string config;

  void add_to(CLI::App* app) {
    app->add_option("--task", task, "Built-in task: page, baseline, layout, ornament, photo");
    app->add_option("--config", config, "Task config file (JSON)");
  }

  TaskConfig resolve() const {
    if (!config.empty()) return load_task_config(config);
    if (task.empty()) throw std::invalid_argument("either --task or --config is required");
    TaskConfig t = builtin_task(task);
    validate(t);
    return t;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dhseg: document image segmentation toolkit"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a model on images/ + labels/");
  TaskArgs train_task;
  train_task.add_to(train);
  std::string train_input, train_output, train_weights;
  std::optional<std::uint64_t> train_seed;
  int train_epochs = -1;
  bool quiet = false;
  train->add_option("--input", train_input, "Dataset directory")->required();
  train->add_option("--output", train_output, "Output directory")->required();
  train->add_option("--weights", train_weights, "Initial weights (full model or encoder only)");
  train->add_option("--seed", train_seed, "Random seed");
  train->add_option("--epochs", train_epochs, "Override the task's epoch count");
  train->add_flag("--quiet", quiet, "No per-step progress");

  // predict
  auto* predict = app.add_subcommand("predict", "Predict masks and geometry for images");
  TaskArgs predict_task;
  predict_task.add_to(predict);
  std::string predict_weights, predict_output, page_weights;
  std::vector<std::string> predict_inputs;
  int jobs = 1;
  predict->add_option("--weights", predict_weights, "Model weights")->required();
  predict->add_option("--input", predict_inputs, "Image files or directories")->required();
  predict->add_option("--output", predict_output, "Output directory")->required();
  predict->add_option("--jobs", jobs, "Parallel image workers")->check(CLI::PositiveNumber);
  predict->add_option("--page-weights", page_weights, "Page model for intersect_page_mask");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against ground truth");
  TaskArgs eval_task;
  eval_task.add_to(evaluate);
  std::string eval_input, eval_truth, eval_output;
  evaluate->add_option("--input", eval_input, "Prediction directory")->required();
  evaluate->add_option("--ground-truth", eval_truth, "Ground-truth label directory")->required();
  evaluate->add_option("--output", eval_output, "Report directory (metrics.json, metrics.csv)");

  // inspect-arch
  auto* inspect = app.add_subcommand("inspect-arch", "Print the per-layer architecture report");
  TaskArgs inspect_task;
  inspect_task.add_to(inspect);
  int classes = 2, height = 320, width = 320;
  inspect->add_option("--classes", classes, "Class count when no task is given");
  inspect->add_option("--height", height, "Input height");
  inspect->add_option("--width", width, "Input width");

  // init-weights
  auto* init = app.add_subcommand("init-weights", "Write freshly initialized weights");
  TaskArgs init_task;
  init_task.add_to(init);
  std::string init_output;
  std::uint64_t init_seed = 0;
  init->add_option("--output", init_output, "Weights file")->required();
  init->add_option("--seed", init_seed, "Random seed");

  // show-config
  auto* show = app.add_subcommand("show-config", "Print a task's resolved config as JSON");
  TaskArgs show_task;
  show_task.add_to(show);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      TaskConfig task = train_task.resolve();
      if (train_epochs >= 0) task.train.epochs = train_epochs;
      TrainRunOptions opt;
      opt.dataset_dir = train_input;
      opt.output_dir = train_output;
      opt.seed = train_seed;
      if (!train_weights.empty()) opt.init_weights = fs::path(train_weights);
      if (!quiet) {
        opt.on_step = [](const StepInfo& s) {
          std::fprintf(stderr, "epoch %d step %lld lr %.3g loss %.6f\n", s.epoch + 1, s.step, s.lr, s.loss);
        };
      }
      const TrainRunResult r = run_train(task, opt);
      for (size_t e = 0; e < r.fit.history.size(); ++e) std::printf("epoch %zu mean loss %.6f\n", e + 1, r.fit.history[e]);
      std::printf("checkpoint %s\nlog %s\n", r.final_checkpoint.c_str(), r.log_path.c_str());
    } else if (*predict) {
      const TaskConfig task = predict_task.resolve();
      PredictOptions opt;
      opt.output_dir = predict_output;
      opt.jobs = jobs;
      if (!page_weights.empty()) opt.page_weights = fs::path(page_weights);
      std::vector<fs::path> inputs(predict_inputs.begin(), predict_inputs.end());
      const auto images = collect_images(inputs);
      if (images.empty()) throw std::invalid_argument("no input images found");
      const auto results = run_predict(task, load_weights(predict_weights), images, opt);
      std::printf("wrote predictions for %zu image(s) to %s\n", results.size(), predict_output.c_str());
    } else if (*evaluate) {
      const TaskConfig task = eval_task.resolve();
      const MetricsReport report = run_evaluate(task, eval_input, eval_truth);
      if (!eval_output.empty()) report.write(fs::path(eval_output) / "metrics.json", fs::path(eval_output) / "metrics.csv");
      std::cout << report.to_csv();
    } else if (*inspect) {
      ArchConfig a;
      if (!inspect_task.task.empty() || !inspect_task.config.empty()) a.n_classes = inspect_task.resolve().n_classes();
      else a.n_classes = classes;
      const NetworkGraph g = build_graph(a);
      std::cout << format_graph_report(g, {1, height, width, a.input_channels});
    } else if (*init) {
      const TaskConfig task = init_task.resolve();
      save_weights(init_weights(task_graph(task), init_seed), init_output);
      std::printf("wrote %s\n", init_output.c_str());
    } else if (*show) {
      std::cout << task_config_to_json(show_task.resolve()) << '\n';
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

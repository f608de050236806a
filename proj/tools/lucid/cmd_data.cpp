#include <iostream>

#include "common.hpp"
#include "lucid/error.hpp"

namespace lucid::cli {

void register_data(CLI::App& app) {
  auto* data = app.add_subcommand("data", "Dataset preparation");
  data->require_subcommand(1);

  struct SynthOpts {
    std::string mnist_dir, out;
    std::uint64_t seed = 0;
    std::optional<int> cap;
  };
  auto so = std::make_shared<SynthOpts>();
  auto* synth = data->add_subcommand("synth-cmnist", "Colour MNIST digits 1/4/7 red/green/blue (9 classes)");
  synth->add_option("--mnist-dir", so->mnist_dir, "MNIST directory (IDX files)")->required()->check(CLI::ExistingDirectory);
  synth->add_option("--out", so->out, "Output dataset directory")->required();
  synth->add_option("--seed", so->seed, "Colour assignment seed");
  synth->add_option("--cap", so->cap, "Keep at most this many samples per split")->check(CLI::PositiveNumber);
  synth->callback([so] {
    CmnistSpec spec;
    spec.seed = so->seed;
    spec.cap = so->cap;
    const auto train = synthesize_cmnist(load_dataset_dir(so->mnist_dir, Split::kTrain), spec);
    const auto test = synthesize_cmnist(load_dataset_dir(so->mnist_dir, Split::kTest), spec);
    save_dataset_dir(so->out, train, test, cmnist_manifest(spec, train.class_names));
    info("cmnist written", {{"out", so->out}, {"train", train.size()}, {"test", test.size()}, {"seed", so->seed}});
  });

  auto dir = std::make_shared<std::string>();
  auto* inspect = data->add_subcommand("info", "Summarize a dataset directory");
  inspect->add_option("--dataset", *dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  inspect->callback([dir] {
    json out = {{"dataset", *dir}};
    for (Split s : {Split::kTrain, Split::kTest}) {
      try {
        const auto ds = load_dataset_dir(*dir, s);
        std::vector<int> counts(static_cast<std::size_t>(ds.num_classes), 0);
        for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
        out[split_name(s)] = {{"size", ds.size()},
                              {"shape", {ds.height(), ds.width(), ds.channels()}},
                              {"classes", ds.num_classes},
                              {"class_names", ds.class_names},
                              {"counts", counts}};
      } catch (const IoError&) {
        out[split_name(s)] = nullptr;
      }
    }
    std::cout << out.dump(2) << '\n';
  });
}

}  // namespace lucid::cli

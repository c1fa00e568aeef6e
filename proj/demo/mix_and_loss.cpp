// Blends a handful of long-tailed samples, prints their mix records and pair
// sets, then evaluates both losses on a freshly initialized model.

#include <iostream>

#include "smc/smc.hpp"

int main() {
  smc::SynthSpec spec;
  spec.classes = 5;
  spec.n_max = 40;
  spec.rho = 10.0;
  spec.image_size = 16;
  const auto synth = smc::synth_longtail(spec);
  const auto& data = synth.dataset;

  smc::TrainConfig config;
  config.batch_size = 6;
  config.two_views = false;
  const auto q = smc::foreground_class_probs(config, synth.stats);
  std::cout << "foreground class probabilities:";
  for (double v : q) std::cout << ' ' << v;
  std::cout << "\n\n";

  auto rng = smc::seeded(7, 1);
  const auto batch = smc::detail::build_batch(config, data, q, rng);
  for (std::size_t i = 0; i < batch.records.size(); ++i)
    std::cout << '[' << i << "] " << smc::format_record(batch.records[i]) << '\n';

  const auto sets = smc::classify_pairs(batch.records);
  auto show = [&](const char* name, const std::vector<std::vector<std::size_t>>& s) {
    std::cout << name << ':';
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::cout << " {";
      for (std::size_t k = 0; k < s[i].size(); ++k) std::cout << (k ? "," : "") << s[i][k];
      std::cout << '}';
    }
    std::cout << '\n';
  };
  std::cout << '\n';
  show("F", sets.fg);
  show("B", sets.bg);
  show("C", sets.cross);

  const std::size_t widths[] = {64};
  const auto params = smc::init_model(widths, data.num_classes(), data.dims(), 1);
  smc::Tape tape;
  smc::ModelGraph model(tape, params);
  const auto features = model.encode(tape.constant(smc::images_to_tensor(batch.images)));
  auto labels = smc::Tensor::zeros({batch.records.size(), data.num_classes()});
  for (std::size_t i = 0; i < batch.records.size(); ++i)
    for (std::size_t k = 0; k < data.num_classes(); ++k) labels(i, k) = batch.records[i].soft_label[k];

  const auto l_smc = smc::smc_loss(model.project(features), sets, batch.records, config.tau);
  const auto l_bce = smc::balanced_ce(model.classify(features), labels, synth.stats.log_prior);
  const auto total = smc::total_loss(l_bce, l_smc, config.eta);
  std::cout << "\nL_smc " << l_smc.value().values[0] << "  L_bce " << l_bce.value().values[0] << "  total "
            << total.value().values[0] << '\n';
}

// Train a small hybrid model on synthetic lesion images, then explain one
// test image and score the test split.

#include <cstdio>

#include "hybrid/hybrid.hpp"

using namespace hyb;

int main() {
  SynthSpec spec;
  spec.count = 120;
  spec.image_size = 32;
  spec.radius_step = 1.0;
  const Dataset ds = synth_dataset(spec);

  ModelConfig mc;
  mc.backbone.input_size = 32;
  mc.backbone.feature_dim = 16;

  TrainConfig tc;
  tc.epochs = 8;
  tc.lr0 = 2e-3;
  tc.momentum = 0.9;
  tc.clip_norm = 1.0;
  tc.lambda = 1e-3;
  tc.val_fraction = 0.15;
  tc.test_fraction = 0.2;
  const Split split = split_dataset(ds, tc.val_fraction, tc.test_fraction, tc.seed);

  HybridModel<float> model(mc);
  const FitResult fr = fit(model, ds, split, tc, [](const EpochRecord& r) {
    std::printf("epoch %2zu  ce %.4f  val_acc %.3f\n", r.epoch, r.ce, r.val_accuracy);
  });
  restore(model, fr.best);

  const EvalResult test = evaluate(model, ds, split.test);
  const auto ci = bootstrap_ci(test.labels, test.predictions, kappa_metric(ds.classes, KappaWeights::quadratic), 1);
  std::printf("test accuracy %.3f, quadratic kappa %.3f [%.3f, %.3f]\n", test.accuracy(), ci.estimate, ci.lower, ci.upper);

  const Sample& s = ds.samples[split.test.front()];
  const auto ex = explain_once(model, s.image, s.id);
  std::printf("%s: label %zu, predicted %zu (p=%.3f)\n", s.id.c_str(), s.label, ex.predicted,
              ex.probabilities[ex.predicted]);
  // Cells above the map mean, next to the lesion mask.
  const Heatmap& h = ex.heatmaps[ex.predicted];
  const double m = h.mean();
  const LesionMask* mask = s.combined_mask();
  for (std::size_t y = 0; y < h.height; y += 2) {
    for (std::size_t x = 0; x < h.width; x += 2) std::putchar(h.at(y, x) > m ? '#' : '.');
    std::fputs("   ", stdout);
    for (std::size_t x = 0; x < h.width; x += 2) std::putchar(mask && mask->at(y, x) ? 'o' : '.');
    std::putchar('\n');
  }
}

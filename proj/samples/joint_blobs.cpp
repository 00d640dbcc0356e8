// SPDX-License-Identifier: Apache-2.0
// Trains one expert on a 2-D ten-class toy dataset, then distills it into a
// fresh model from model-inversion samples only, and compares test accuracy.
#include <cstdio>

#include "exml/exml.hpp"

int main() {
  using namespace exml;
  const auto data = load_dataset<float>({"builtin:blobs", 100, 50, 1});
  const auto experiences = build_scenario(data, {ScenarioKind::Joint, 1, {10}, 1});

  ArchitectureSpec arch;
  arch.kind = ArchKind::Mlp;
  arch.input_shape = {2};
  arch.hidden = 32;
  arch.num_classes = 10;

  TrainConfig train;
  train.epochs = 20;
  const auto stream = train_stream(experiences, arch, train, 1);
  std::printf("expert accuracy:    %.3f\n", stream_accuracy(stream.experts[0], experiences));

  GeneratorConfig gen;
  gen.method = GenMethod::ModelInversion;
  gen.iterations = 200;
  DistillConfig distill;
  distill.iterations = 1500;
  const auto result =
      run_exml(stream.stream(), arch, generator_source<float>(gen), 500, distill, 1);
  std::printf("ex-model accuracy:  %.3f\n", stream_accuracy(result.model.net, experiences));
  return 0;
}

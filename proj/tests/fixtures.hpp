#pragma once

#include "look/config.hpp"
#include "look/dataset.hpp"
#include "look/trainer.hpp"

namespace fixture {

inline look::SyntheticSpec tiny_spec() {
  look::SyntheticSpec s;
  s.num_classes = 3;
  s.subclasses_per_class = 2;
  s.input_dim = 8;
  s.samples_per_subclass = 100;
  s.sigma = 0.15;
  return s;
}

inline look::TrainConfig tiny_train(look::Objective obj = look::Objective::kLook, int epochs = 2) {
  look::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.queue_capacity = 64;
  c.objective = obj;
  c.encoder = look::MlpSpec{{8, 16, 16}};
  c.projector = look::MlpSpec{{16, 8, 8}};
  c.predictor = look::MlpSpec{{8, 8, 8}};
  c.schedule.k_start = 16;
  c.schedule.k_end = 4;
  c.schedule.lr_decay_epochs = {};
  c.schedule.total_epochs = epochs;
  c.monitor_every = 0;
  c.monitor_k = 20;
  return c;
}

}  // namespace fixture

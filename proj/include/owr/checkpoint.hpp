#pragma once

// Versioned JSON container for a trained model. Layout (version 1):
//
//   format      "owr-checkpoint"
//   version     1
//   step        index of the last completed step
//   method      "ours" | "nno" | "deepnno"
//   extractor   { input_dim, layer_dims, activation, init_seed,
//                 layers: [{ weight: [[row]...], bias: [...] }] }
//   classes     [{ id, count, threshold, centroid: [...] }]   threshold may be "inf"
//   variance    { count, mean, m2 }
//   rejection   { strict, tau, tau_step, z, distance }
//   memory      { budget, heldout_fraction,
//                 classes: [{ id, exemplars: [{ id, partition, input: [...] }] }] }
//   experiment  resolved experiment configuration (object, optional)
//
// Numbers are written with round-trip precision, so a reload reproduces the
// model bit for bit.

#include "owr/protocol.hpp"

#include <filesystem>
#include <string>

namespace owr {

inline constexpr int kCheckpointVersion = 1;

std::string checkpoint_to_json(const OwrModel& model, const std::string& experiment_json = {});
OwrModel checkpoint_from_json(const std::string& text, std::string* experiment_json = nullptr);

void save_checkpoint(const std::filesystem::path& path, const OwrModel& model, const std::string& experiment_json = {});
OwrModel load_checkpoint(const std::filesystem::path& path, std::string* experiment_json = nullptr);

}  // namespace owr

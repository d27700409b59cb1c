// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration: model, data, mixer, train and retrieval sections.
// Unknown keys are rejected with the offending field path.
#pragma once

#include <filesystem>
#include <string>

#include "cmmix/mixer.hpp"
#include "cmmix/model.hpp"
#include "cmmix/pretrain.hpp"
#include "cmmix/retrieval.hpp"
#include "cmmix/signal.hpp"

namespace cmmix::config {

struct RunConfig {
    std::string preset = "vit_base";
    model::ViTConfig model;
    signal::DataConfig data;
    mixer::MixerConfig mixer;
    pretrain::TrainRunConfig train;
    retrieval::RetrievalConfig retrieval;

    /// Cross-section checks (clip count and image size must agree).
    void validate() const;
};

/// Defaults for a named preset: "vit_base" (full scale) or "toy" (desk scale).
RunConfig preset(const std::string& name);

/// Parses a JSON document. `"preset"` selects the base values; every other
/// key overrides them. Throws ConfigError with the field path.
RunConfig parse(const std::string& json_text);
RunConfig load(const std::filesystem::path& path);
/// Every effective value, in the same schema `parse` accepts.
std::string to_json(const RunConfig& cfg);

}  // namespace cmmix::config

#pragma once

#include "surgmotion/trainer.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace surgmotion {

/// Applies the keys of a TOML document on top of `base`. Unknown keys and
/// type mismatches are ValidationErrors.
TrainConfig parse_train_config(std::string_view toml_text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& file, TrainConfig base = {});

/// Every key, in the layout parse_train_config reads.
std::string train_config_to_toml(const TrainConfig& config);

}  // namespace surgmotion

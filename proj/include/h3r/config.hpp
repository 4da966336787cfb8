#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "h3r/network.hpp"
#include "h3r/training.hpp"

namespace h3r {

// Flat `key = value` config with include-defaults semantics: unspecified keys
// keep their struct defaults, unknown keys are rejected.
class KeyValues {
public:
    void set(const std::string& key, const std::string& value);
    std::optional<std::string> get(const std::string& key) const;
    bool consume_into(const std::string& key, std::string& out);  // marks consumed
    std::vector<std::string> unconsumed() const;
    const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

private:
    std::vector<std::pair<std::string, std::string>> items_;
    std::vector<bool> consumed_;
};

KeyValues parse_config_file(const std::string& path);

void apply_model_config(KeyValues& kv, ModelConfig& cfg);
void apply_train_config(KeyValues& kv, TrainConfig& cfg);

KeyValues model_config_to_kv(const ModelConfig& cfg);
KeyValues train_config_to_kv(const TrainConfig& cfg);

void write_config_file(const KeyValues& kv, const std::string& path);
void print_config(const KeyValues& kv, std::ostream& os);

}  // namespace h3r

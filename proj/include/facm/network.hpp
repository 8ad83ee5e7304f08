#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "facm/autodiff.hpp"
#include "facm/flow.hpp"
#include "facm/rng.hpp"
#include "facm/tensor.hpp"

namespace facm::nn {

struct NetworkConfig {
    std::size_t input_dim = 2;
    std::size_t hidden_width = 256;
    std::size_t depth = 4;  // number of hidden layers
    std::size_t time_embed_dim = 128;
    int num_classes = 0;    // 0 = unconditional
    flow::Scheme scheme = flow::Scheme::ExpandedInterval;
    std::uint64_t seed = 0;
    double dropout = 0.0;

    void validate() const;
    bool operator==(const NetworkConfig&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

/// Angular frequencies of the sinusoidal time features. The slowest has
/// period 4 so that the whole encoded range [0, 2] maps injectively.
std::vector<double> time_frequencies(std::size_t time_embed_dim);
/// [sin(ω_k c)..., cos(ω_k c)...] for one condition value.
std::vector<double> sinusoidal_embedding(double c, std::size_t time_embed_dim);

/// Velocity network F(x_t, c): an MLP whose first hidden layer receives the
/// sum of an input projection, the time embedding of c[0], an optional
/// auxiliary embedding of c[1] and an optional class embedding.
class Network {
public:
    /// Parameters bound onto a tape, keyed like params().
    struct Bound {
        std::map<std::string, ad::Var> vars;
        const ad::Var& operator[](const std::string& name) const { return vars.at(name); }
    };

    static Network init(const NetworkConfig& config);
    Network(NetworkConfig config, ParamMap params);

    const NetworkConfig& config() const noexcept { return config_; }
    const ParamMap& params() const noexcept { return params_; }
    ParamMap& params() noexcept { return params_; }
    std::size_t parameter_count() const;

    /// trainable=false records the parameters as constants, so they never
    /// reach a gradient map (used for frozen teachers).
    Bound bind(ad::Tape& tape, bool trainable) const;

    /// Taped forward pass. `cond` is (B × arity); its tangent (if any) and the
    /// tangent of x flow through to the output tangent. Labels use -1 for the
    /// null class.
    ad::Var forward(const Bound& bound, const ad::Var& x, const ad::Var& cond, std::span<const int> labels,
                    Rng* dropout_rng = nullptr) const;

    /// Maps -1 to the reserved null row and validates the rest.
    std::vector<std::size_t> class_rows(std::span<const int> labels, std::size_t batch) const;

private:
    ad::Var time_embedding(const Bound& p, const std::string& prefix, const ad::Var& c) const;

    NetworkConfig config_;
    ParamMap params_;
};

/// Plain evaluation; labels may be empty (all null).
Tensor forward(const Network& net, const Tensor& x_t, const flow::ConditionBatch& cond, std::span<const int> labels = {});
Tensor forward(const Network& net, const Tensor& x_t, const flow::ConditioningSignal& cond,
               std::optional<int> label = std::nullopt);

/// Output and its total derivative along (x_tangent, cond.tangent) in one
/// forward sweep. Refuses FM-task conditions.
ad::DualTensor forward_jvp(const Network& net, const Tensor& x_t, const flow::ConditionBatch& cond,
                           const Tensor& x_tangent, std::span<const int> labels = {});

// --- checkpoints -------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    NetworkConfig config;
    ParamMap params;
    std::optional<ParamMap> ema;
    /// AdamW moments keyed "m/<param>" and "v/<param>".
    std::optional<ParamMap> optimizer;
    std::uint64_t optimizer_step = 0;
    std::uint64_t step = 0;
    std::string config_hash;

    Network network() const { return Network(config, params); }
    /// EMA weights when present, online weights otherwise.
    Network eval_network() const { return Network(config, ema ? *ema : params); }
};

std::string serialize_network_config(const NetworkConfig& config);
NetworkConfig parse_network_config(const std::string& text);

/// Writes to a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<flow::Scheme> expected_scheme = std::nullopt);

void save(const Network& net, const std::filesystem::path& path);
Network load(const std::filesystem::path& path, std::optional<flow::Scheme> expected_scheme = std::nullopt);

}  // namespace facm::nn

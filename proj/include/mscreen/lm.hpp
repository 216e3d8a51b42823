#pragma once

// Uniform handle over the two model families, used by training, checkpoints,
// ABCDigits evaluation and the benchmarks.

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mscreen/baseline.hpp"
#include "mscreen/model.hpp"

namespace mscreen {

struct MultiscreenModel {
  ModelConfig config;
  ModelParams params;
  ScreeningKernel kernel = ScreeningKernel::windowed;
};

struct BaselineModel {
  BaselineConfig config;
  BaselineParams params;
};

using AnyModel = std::variant<MultiscreenModel, BaselineModel>;

enum class ModelKind { multiscreen, baseline };

ModelKind kind_of(const AnyModel& model);
std::string kind_name(ModelKind kind);
ModelKind parse_kind(const std::string& name);

std::vector<ParamRef> param_refs(AnyModel& model);
AnyModel zero_grads(const AnyModel& model);
std::size_t vocab_size(const AnyModel& model);

/// Mean loss of one sequence; accumulates its gradient (scaled by weight) into grads.
double loss_and_grad(const AnyModel& model, std::span<const int> tokens,
                     std::span<const int> targets, AnyModel& grads, double weight = 1.0);

Tensor forward_logits(const AnyModel& model, std::span<const int> tokens,
                      bool last_position_only = false);

/// Anything that maps a token prefix to next-token logits.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<double> next_token_logits(std::span<const int> tokens) const = 0;
  /// Logits at every position, T x |V|.
  virtual Tensor all_logits(std::span<const int> tokens) const = 0;
};

class ModelLM final : public LanguageModel {
 public:
  explicit ModelLM(AnyModel model) : model_(std::move(model)) {}
  std::size_t vocab_size() const override { return mscreen::vocab_size(model_); }
  std::vector<double> next_token_logits(std::span<const int> tokens) const override;
  Tensor all_logits(std::span<const int> tokens) const override;
  const AnyModel& model() const { return model_; }

 private:
  AnyModel model_;
};

}  // namespace mscreen

#include "mscreen/lm.hpp"

#include <stdexcept>

namespace mscreen {

ModelKind kind_of(const AnyModel& model) {
  return std::holds_alternative<MultiscreenModel>(model) ? ModelKind::multiscreen
                                                         : ModelKind::baseline;
}

std::string kind_name(ModelKind kind) {
  return kind == ModelKind::multiscreen ? "multiscreen" : "baseline";
}

ModelKind parse_kind(const std::string& name) {
  if (name == "multiscreen") return ModelKind::multiscreen;
  if (name == "baseline") return ModelKind::baseline;
  throw std::invalid_argument("unknown model kind '" + name + "' (multiscreen | baseline)");
}

std::vector<ParamRef> param_refs(AnyModel& model) {
  return std::visit([](auto& m) { return param_refs(m.params); }, model);
}

AnyModel zero_grads(const AnyModel& model) {
  return std::visit(
      [](const auto& m) -> AnyModel {
        auto g = m;
        g.params = zero_grads(m.params);
        return g;
      },
      model);
}

std::size_t vocab_size(const AnyModel& model) {
  return std::visit([](const auto& m) { return m.config.vocab_size; }, model);
}

double loss_and_grad(const AnyModel& model, std::span<const int> tokens,
                     std::span<const int> targets, AnyModel& grads, double weight) {
  if (kind_of(model) != kind_of(grads)) {
    throw std::invalid_argument("loss_and_grad: gradient holder has a different model kind");
  }
  Tensor logits;
  Tensor dlogits;
  CrossEntropy ce;
  if (const auto* ms = std::get_if<MultiscreenModel>(&model)) {
    ForwardCache cache;
    logits = model_forward(tokens, ms->params, ms->config, {}, &cache);
    const std::size_t n = cross_entropy(logits, targets).count;
    if (n == 0) return 0.0;
    ce = cross_entropy(logits, targets, &dlogits, weight / static_cast<double>(n));
    model_backward(ms->params, ms->config, cache, dlogits,
                   std::get<MultiscreenModel>(grads).params);
  } else {
    const auto& bl = std::get<BaselineModel>(model);
    BaselineCache cache;
    logits = baseline_forward(tokens, bl.params, bl.config, &cache);
    const std::size_t n = cross_entropy(logits, targets).count;
    if (n == 0) return 0.0;
    ce = cross_entropy(logits, targets, &dlogits, weight / static_cast<double>(n));
    baseline_backward(bl.params, bl.config, cache, dlogits, std::get<BaselineModel>(grads).params);
  }
  return ce.mean();
}

Tensor forward_logits(const AnyModel& model, std::span<const int> tokens,
                      bool last_position_only) {
  if (const auto* ms = std::get_if<MultiscreenModel>(&model)) {
    ForwardOptions opt;
    opt.kernel = ms->kernel;
    opt.last_position_only = last_position_only;
    return model_forward(tokens, ms->params, ms->config, opt);
  }
  const auto& bl = std::get<BaselineModel>(model);
  return baseline_forward(tokens, bl.params, bl.config, nullptr, last_position_only);
}

std::vector<double> ModelLM::next_token_logits(std::span<const int> tokens) const {
  const Tensor logits = forward_logits(model_, tokens, true);
  return logits.storage();
}

Tensor ModelLM::all_logits(std::span<const int> tokens) const {
  return forward_logits(model_, tokens, false);
}

}  // namespace mscreen

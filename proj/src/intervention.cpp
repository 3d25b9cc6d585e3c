#include "protogap/intervention.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "protogap/error.hpp"

namespace protogap {
namespace {

std::string join(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (k) s += ",";
    s += std::to_string(xs[k]);
  }
  return s;
}

std::size_t parse_index(const std::string& s, const std::string& whole) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw SpecError("bad layer index '" + s + "' in intervention '" + whole + "'");
  }
  return std::stoul(s);
}

std::vector<std::size_t> parse_list(const std::string& s, const std::string& whole) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_index(item, whole));
  if (out.empty()) throw SpecError("empty index list in intervention '" + whole + "'");
  return out;
}

std::pair<std::string, std::string> split_once(const std::string& s, const std::string& sep,
                                               const std::string& whole) {
  const auto at = s.find(sep);
  if (at == std::string::npos) throw SpecError("malformed intervention '" + whole + "'");
  return {s.substr(0, at), s.substr(at + sep.size())};
}

}  // namespace

std::string to_string(const Intervention& iv) {
  struct Printer {
    std::string operator()(const Replace& r) const {
      return "replace:" + std::to_string(r.target) + "<-" + std::to_string(r.source);
    }
    std::string operator()(const Interchange& x) const {
      return "interchange:" + std::to_string(x.i) + "," + std::to_string(x.j);
    }
    std::string operator()(const Delete& d) const { return "delete:" + join(d.layers); }
    std::string operator()(const AverageMerge& a) const {
      return "average:" + std::to_string(a.i) + "," + std::to_string(a.j);
    }
    std::string operator()(const Share& s) const {
      return "share:" + std::to_string(s.source) + "@" + join(s.positions);
    }
    std::string operator()(const HeadReplace& h) const {
      return "head:" + std::to_string(h.target) + "<-" + std::to_string(h.source) + "#" + std::to_string(h.head);
    }
    std::string operator()(const RopeOff&) const { return "rope-off"; }
  };
  return std::visit(Printer{}, iv);
}

Intervention parse_intervention(const std::string& text) {
  if (text == "rope-off") return RopeOff{};
  const auto [kind, body] = split_once(text, ":", text);
  if (kind == "replace") {
    const auto [t, s] = split_once(body, "<-", text);
    return Replace{parse_index(t, text), parse_index(s, text)};
  }
  if (kind == "interchange" || kind == "average") {
    const auto xs = parse_list(body, text);
    if (xs.size() != 2) throw SpecError("'" + text + "' needs exactly two layers");
    if (kind == "interchange") return Interchange{xs[0], xs[1]};
    return AverageMerge{xs[0], xs[1]};
  }
  if (kind == "delete") return Delete{parse_list(body, text)};
  if (kind == "share") {
    const auto [s, ps] = split_once(body, "@", text);
    return Share{parse_index(s, text), parse_list(ps, text)};
  }
  if (kind == "head") {
    const auto [t, rest] = split_once(body, "<-", text);
    const auto [s, h] = split_once(rest, "#", text);
    return HeadReplace{parse_index(t, text), parse_index(s, text), parse_index(h, text)};
  }
  throw SpecError("unknown intervention kind '" + kind + "'");
}

std::size_t ExecutionPlan::first_divergence(const Checkpoint& ck) const {
  if (!rope_enabled) return 0;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const BlockSlot& slot = slots[s];
    if (slot.position != s || slot.weights != &ck.layers[s] || !slot.head_sources.empty()) return s;
  }
  return slots.size();
}

ExecutionPlan build_plan(const Checkpoint& ck, std::span<const Intervention> interventions) {
  const std::size_t L = ck.n_layers();
  const std::size_t H = ck.config.n_heads;
  auto check_index = [&](std::size_t i, const Intervention& iv) {
    if (i >= L) {
      throw SpecError("layer index " + std::to_string(i) + " out of range [0, " + std::to_string(L) + ") in " +
                      to_string(iv));
    }
  };

  ExecutionPlan plan;
  std::vector<BlockSlot> route(L);
  for (std::size_t s = 0; s < L; ++s) route[s] = BlockSlot{s, &ck.layers[s], {}};
  std::set<std::size_t> targeted;
  std::set<std::size_t> deleted;

  auto assign = [&](std::size_t slot, const LayerWeights* w) {
    route[slot].weights = w;
    route[slot].head_sources.clear();
  };

  for (const Intervention& iv : interventions) {
    if (const auto* r = std::get_if<Replace>(&iv)) {
      check_index(r->target, iv);
      check_index(r->source, iv);
      assign(r->target, &ck.layers[r->source]);
      targeted.insert(r->target);
    } else if (const auto* x = std::get_if<Interchange>(&iv)) {
      check_index(x->i, iv);
      check_index(x->j, iv);
      if (x->i == x->j) continue;
      assign(x->i, &ck.layers[x->j]);
      assign(x->j, &ck.layers[x->i]);
      targeted.insert(x->i);
      targeted.insert(x->j);
    } else if (const auto* d = std::get_if<Delete>(&iv)) {
      for (std::size_t i : d->layers) {
        check_index(i, iv);
        if (!deleted.insert(i).second) {
          throw SpecError("layer " + std::to_string(i) + " deleted more than once");
        }
      }
    } else if (const auto* a = std::get_if<AverageMerge>(&iv)) {
      check_index(a->i, iv);
      check_index(a->j, iv);
      auto merged = std::make_shared<const LayerWeights>(average_layers(ck.layers[a->i], ck.layers[a->j]));
      plan.owned.push_back(merged);
      assign(a->i, merged.get());
      assign(a->j, merged.get());
      targeted.insert(a->i);
      targeted.insert(a->j);
    } else if (const auto* sh = std::get_if<Share>(&iv)) {
      check_index(sh->source, iv);
      if (sh->positions.empty()) throw SpecError("share needs at least one position");
      for (std::size_t p : sh->positions) {
        check_index(p, iv);
        assign(p, &ck.layers[sh->source]);
        targeted.insert(p);
      }
    } else if (const auto* h = std::get_if<HeadReplace>(&iv)) {
      check_index(h->target, iv);
      check_index(h->source, iv);
      if (h->head >= H) {
        throw SpecError("head index " + std::to_string(h->head) + " out of range [0, " + std::to_string(H) + ")");
      }
      auto& slot = route[h->target];
      if (slot.head_sources.empty()) slot.head_sources.assign(H, nullptr);
      slot.head_sources[h->head] = &ck.layers[h->source];
      targeted.insert(h->target);
    } else if (std::holds_alternative<RopeOff>(iv)) {
      plan.rope_enabled = false;
    }
  }

  for (std::size_t i : deleted) {
    if (targeted.count(i)) {
      throw SpecError("conflicting interventions: layer " + std::to_string(i) + " is both deleted and rerouted");
    }
  }
  if (deleted.size() == L) throw SpecError("interventions delete every layer");

  for (std::size_t s = 0; s < L; ++s) {
    if (deleted.count(s)) continue;
    BlockSlot slot = route[s];
    // Head overrides that resolve to the slot's own weights are no-ops.
    if (!slot.head_sources.empty()) {
      bool any = false;
      for (auto& src : slot.head_sources) {
        if (src == slot.weights) src = nullptr;
        any = any || src != nullptr;
      }
      if (!any) slot.head_sources.clear();
    }
    plan.slots.push_back(std::move(slot));
  }
  return plan;
}

}  // namespace protogap

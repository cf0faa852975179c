#include "spfl/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "spfl/errors.hpp"

namespace spfl {

TriggerSpec TriggerSpec::square(int side, float value, int row_off,
                                int col_off, int target_label,
                                const std::string& name) {
  TriggerSpec t;
  t.name = name;
  t.rows = side;
  t.cols = side;
  t.mask.assign(static_cast<size_t>(side) * side, 1);
  t.value = value;
  t.row_off = row_off;
  t.col_off = col_off;
  t.target_label = target_label;
  return t;
}

TriggerSpec TriggerSpec::default_for(int height, int width, int target_label) {
  int side = height >= 32 ? 4 : 3;
  return square(side, 1.0f, height - side, width - side, target_label,
                "corner-square");
}

size_t TriggerSpec::active_cells() const {
  size_t n = 0;
  for (uint8_t m : mask) n += m != 0;
  return n;
}

void TriggerSpec::validate_bounds(int image_h, int image_w) const {
  if (rows < 1 || cols < 1 ||
      mask.size() != static_cast<size_t>(rows) * cols)
    throw ConfigError("trigger '" + name + "': mask grid is malformed");
  if (active_cells() == 0)
    throw ConfigError("trigger '" + name + "': mask is empty");
  if (row_off < 0 || col_off < 0 || row_off + rows > image_h ||
      col_off + cols > image_w)
    throw ConfigError("trigger '" + name + "' lies outside the image bounds");
}

void TriggerSpec::validate(int image_h, int image_w, int num_classes) const {
  validate_bounds(image_h, image_w);
  if (target_label < 0 || target_label >= num_classes)
    throw ConfigError("trigger '" + name + "': target label out of range");
}

std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::DPA: return "DPA";
    case AttackMethod::MPA: return "MPA";
    case AttackMethod::DBA: return "DBA";
    case AttackMethod::LIE: return "LIE";
  }
  return "?";
}

AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "DPA") return AttackMethod::DPA;
  if (s == "MPA") return AttackMethod::MPA;
  if (s == "DBA") return AttackMethod::DBA;
  if (s == "LIE") return AttackMethod::LIE;
  throw ConfigError("unknown attack method '" + s + "'");
}

bool AttackPlan::is_adversary(int client) const {
  return std::find(adversary_ids.begin(), adversary_ids.end(), client) !=
         adversary_ids.end();
}

bool AttackPlan::attacks_at(int client, int t) const {
  if (!is_adversary(client)) return false;
  if (!staggered) return schedule.count(t) > 0;
  // sorted schedule rounds map to adversaries in id order
  auto pos = std::find(adversary_ids.begin(), adversary_ids.end(), client) -
             adversary_ids.begin();
  auto it = schedule.begin();
  std::advance(it, static_cast<long>(pos) % static_cast<long>(schedule.size()));
  return *it == t;
}

int AttackPlan::attackers_at(int t) const {
  int n = 0;
  for (int id : adversary_ids) n += attacks_at(id, t);
  return n;
}

const TriggerSpec& AttackPlan::trigger_for(int client) const {
  if (method != AttackMethod::DBA || dba_parts.empty()) return trigger;
  auto pos = std::find(adversary_ids.begin(), adversary_ids.end(), client) -
             adversary_ids.begin();
  return dba_parts[static_cast<size_t>(pos) % dba_parts.size()];
}

void AttackPlan::validate(int clients, int rounds, int image_h, int image_w,
                          int num_classes) const {
  if (adversary_ids.empty())
    throw ConfigError("attack plan has no adversaries");
  if (static_cast<int>(adversary_ids.size()) > clients - 1)
    throw ConfigError("attack plan must leave at least one benign client");
  for (int id : adversary_ids)
    if (id < 0 || id >= clients)
      throw ConfigError("adversary id " + std::to_string(id) + " out of range");
  for (int t : schedule)
    if (t < 0 || t >= rounds)
      throw ConfigError("attack round " + std::to_string(t) + " outside [0,T)");
  trigger.validate(image_h, image_w, num_classes);
  if (method == AttackMethod::DBA) {
    if (dba_parts.size() != adversary_ids.size())
      throw ConfigError("DBA needs one trigger part per adversary");
    size_t total = 0;
    for (const auto& p : dba_parts) {
      p.validate(image_h, image_w, num_classes);
      total += p.active_cells();
    }
    if (total != trigger.active_cells())
      throw ConfigError("DBA parts do not partition the global trigger");
  }
  if (staggered && schedule.size() != adversary_ids.size())
    throw ConfigError("staggered schedule needs one round per adversary");
}

void stamp_trigger(const TriggerSpec& trigger, Tensor<float>& images) {
  const int n = images.dim(0), c = images.dim(1);
  const int h = images.dim(2), w = images.dim(3);
  trigger.validate_bounds(h, w);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      float* img = images.ptr() + (static_cast<size_t>(b) * c + ch) *
                                      static_cast<size_t>(h) * w;
      for (int r = 0; r < trigger.rows; ++r)
        for (int cc = 0; cc < trigger.cols; ++cc)
          if (trigger.mask[static_cast<size_t>(r) * trigger.cols + cc])
            img[(trigger.row_off + r) * w + trigger.col_off + cc] =
                trigger.value;
    }
}

void poison_batch(Batch<float>& batch, const TriggerSpec& trigger, int count) {
  const int n = batch.size();
  if (count < 0 || count > n)
    throw std::invalid_argument("poison_batch: count exceeds batch size");
  if (count == 0) return;
  const int c = batch.inputs.dim(1), h = batch.inputs.dim(2),
            w = batch.inputs.dim(3);
  const int k = batch.labels.dim(1);
  trigger.validate(h, w, k);
  for (int b = 0; b < count; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      float* img = batch.inputs.ptr() + (static_cast<size_t>(b) * c + ch) *
                                            static_cast<size_t>(h) * w;
      for (int r = 0; r < trigger.rows; ++r)
        for (int cc = 0; cc < trigger.cols; ++cc)
          if (trigger.mask[static_cast<size_t>(r) * trigger.cols + cc])
            img[(trigger.row_off + r) * w + trigger.col_off + cc] =
                trigger.value;
    }
    float* lab = batch.labels.ptr() + static_cast<size_t>(b) * k;
    std::fill(lab, lab + k, 0.0f);
    lab[trigger.target_label] = 1.0f;
  }
}

BatchMaker<float> poisoned_batch_maker(BatchMaker<float> inner,
                                       TriggerSpec trigger, int count) {
  return [inner = std::move(inner), trigger = std::move(trigger),
          count](int epoch) {
    std::vector<Batch<float>> batches = inner(epoch);
    for (auto& b : batches)
      poison_batch(b, trigger, std::min(count, b.size()));
    return batches;
  };
}

Params<float> dpa_client_update(const Engine<float>& engine,
                                const Params<float>& global,
                                const BatchMaker<float>& make_batches,
                                const TriggerSpec& trigger, int poison_count,
                                int epochs, double lr) {
  return sgd_round(engine, global,
                   poisoned_batch_maker(make_batches, trigger, poison_count),
                   epochs, lr);
}

std::vector<float> mpa_scale(const std::vector<float>& malicious,
                             const std::vector<float>& global, double gamma) {
  if (malicious.size() != global.size())
    throw std::invalid_argument("mpa_scale: length mismatch");
  std::vector<float> out(global.size());
  const float g = static_cast<float>(gamma);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = global[i] + g * (malicious[i] - global[i]);
  return out;
}

std::vector<TriggerSpec> dba_decompose(const TriggerSpec& global, int parts) {
  if (parts < 2)
    throw std::invalid_argument("dba_decompose: need at least 2 parts");
  int grid = static_cast<int>(std::lround(std::sqrt(double(parts))));
  bool as_grid = grid * grid == parts && global.rows % grid == 0 &&
                 global.cols % grid == 0;
  int strips = parts;
  if (!as_grid && (global.rows < parts || global.rows % parts != 0))
    throw ConfigError("trigger '" + global.name + "' is too small to split into " +
                      std::to_string(parts) + " parts");
  std::vector<TriggerSpec> out;
  auto cut = [&](int r0, int c0, int nr, int nc, int index) {
    TriggerSpec part;
    part.name = global.name + "#" + std::to_string(index);
    part.rows = nr;
    part.cols = nc;
    part.mask.assign(static_cast<size_t>(nr) * nc, 0);
    for (int r = 0; r < nr; ++r)
      for (int c = 0; c < nc; ++c)
        part.mask[static_cast<size_t>(r) * nc + c] =
            global.mask[static_cast<size_t>(r0 + r) * global.cols + (c0 + c)];
    part.value = global.value;
    part.row_off = global.row_off + r0;
    part.col_off = global.col_off + c0;
    part.target_label = global.target_label;
    if (part.active_cells() == 0)
      throw ConfigError("dba_decompose: part " + std::to_string(index) +
                        " covers no trigger pixels");
    out.push_back(std::move(part));
  };
  if (as_grid) {
    int nr = global.rows / grid, nc = global.cols / grid;
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx)
        cut(gy * nr, gx * nc, nr, nc, gy * grid + gx);
  } else {
    int nr = global.rows / strips;
    for (int s = 0; s < strips; ++s) cut(s * nr, 0, nr, global.cols, s);
  }
  return out;
}

std::vector<float> lie_craft(const std::vector<float>& backdoored,
                             const std::vector<float>& mu,
                             const std::vector<float>& sigma, double z) {
  if (backdoored.size() != mu.size() || mu.size() != sigma.size())
    throw std::invalid_argument("lie_craft: length mismatch");
  std::vector<float> out(backdoored.size());
  const float zf = static_cast<float>(z);
  for (size_t i = 0; i < out.size(); ++i) {
    float lo = mu[i] - zf * sigma[i];
    float hi = mu[i] + zf * sigma[i];
    out[i] = std::min(std::max(backdoored[i], lo), hi);
  }
  return out;
}

void population_stats(const std::vector<std::vector<float>>& updates,
                      std::vector<float>& mu, std::vector<float>& sigma) {
  if (updates.empty())
    throw std::invalid_argument("population_stats: no updates");
  const size_t m = updates[0].size();
  mu.assign(m, 0.0f);
  sigma.assign(m, 0.0f);
  for (const auto& u : updates)
    for (size_t i = 0; i < m; ++i) mu[i] += u[i];
  const float inv = 1.0f / static_cast<float>(updates.size());
  for (size_t i = 0; i < m; ++i) mu[i] *= inv;
  for (const auto& u : updates)
    for (size_t i = 0; i < m; ++i) {
      float d = u[i] - mu[i];
      sigma[i] += d * d;
    }
  for (size_t i = 0; i < m; ++i) sigma[i] = std::sqrt(sigma[i] * inv);
}

}  // namespace spfl

#pragma once

#include <set>
#include <string>
#include <vector>

#include "spfl/distill.hpp"
#include "spfl/net.hpp"

namespace spfl {

// Pixel-pattern backdoor trigger. The mask is a rows x cols 0/1 grid placed
// at (row_off, col_off); masked cells are overwritten with `value` on every
// channel and the label becomes target_label.
struct TriggerSpec {
  std::string name = "trigger";
  int rows = 0, cols = 0;
  std::vector<uint8_t> mask;
  float value = 1.0f;
  int row_off = 0, col_off = 0;
  int target_label = 0;

  static TriggerSpec square(int side, float value, int row_off, int col_off,
                            int target_label, const std::string& name);
  // Default patterns: 3x3 white square in the lower-right corner for
  // 28x28 inputs, 4x4 for 32x32.
  static TriggerSpec default_for(int height, int width, int target_label);

  size_t active_cells() const;
  void validate_bounds(int image_h, int image_w) const;
  void validate(int image_h, int image_w, int num_classes) const;
};

enum class AttackMethod { DPA, MPA, DBA, LIE };

std::string to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& s);

// Resolved attack plan: who attacks, when, and how strongly.
struct AttackPlan {
  AttackMethod method = AttackMethod::DPA;
  std::vector<int> adversary_ids;
  std::set<int> schedule;       // F_m, subset of [0, T)
  bool staggered = false;       // DBA single-shot: sorted schedule rounds are
                                // assigned to adversaries one-to-one
  double gamma = 1.0;           // scaling factor
  int poison_per_batch = 20;
  TriggerSpec trigger;          // global trigger (evaluation always uses it)
  std::vector<TriggerSpec> dba_parts;
  double lie_z = 1.5;

  bool is_adversary(int client) const;
  // Does adversary `client` mount the attack at round t?
  bool attacks_at(int client, int t) const;
  // Number of adversaries attacking simultaneously at round t.
  int attackers_at(int t) const;
  // The trigger adversary `client` trains with (DBA uses its local part).
  const TriggerSpec& trigger_for(int client) const;
  void validate(int clients, int rounds, int image_h, int image_w,
                int num_classes) const;
};

// Stamp the trigger on every sample of an image tensor (n,c,h,w).
void stamp_trigger(const TriggerSpec& trigger, Tensor<float>& images);

// Stamp the first `count` samples and flip their labels to the target.
void poison_batch(Batch<float>& batch, const TriggerSpec& trigger, int count);

// Wrap a batch maker so every produced batch is poisoned.
BatchMaker<float> poisoned_batch_maker(BatchMaker<float> inner,
                                       TriggerSpec trigger, int count);

// DPA: plain SGD on backdoored inputs, no scaling.
Params<float> dpa_client_update(const Engine<float>& engine,
                                const Params<float>& global,
                                const BatchMaker<float>& make_batches,
                                const TriggerSpec& trigger, int poison_count,
                                int epochs, double lr);

// Model replacement: w0 + gamma * (x - w0).
std::vector<float> mpa_scale(const std::vector<float>& malicious,
                             const std::vector<float>& global, double gamma);

// Split a trigger into `parts` disjoint sub-triggers covering it exactly.
// A perfect-square part count tiles the mask as a grid; otherwise the rows
// are cut into equal horizontal strips.
std::vector<TriggerSpec> dba_decompose(const TriggerSpec& global, int parts);

// Clamp a backdoored update into [mu - z*sigma, mu + z*sigma] per coordinate.
std::vector<float> lie_craft(const std::vector<float>& backdoored,
                             const std::vector<float>& mu,
                             const std::vector<float>& sigma, double z);

// Coordinate-wise mean and standard deviation over a set of updates.
void population_stats(const std::vector<std::vector<float>>& updates,
                      std::vector<float>& mu, std::vector<float>& sigma);

}  // namespace spfl

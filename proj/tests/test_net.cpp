#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "spfl/distill.hpp"
#include "spfl/losses.hpp"
#include "spfl/net.hpp"

using namespace spfl;

namespace {

NetworkSpec tiny_cnn_spec() {
  NetworkSpec s;
  s.in_channels = 2;
  s.in_height = 8;
  s.in_width = 8;
  s.num_classes = 5;
  s.layers = {ConvLayer{3, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{2, 2},
              ConvLayer{4, 3, 1, 1}, ReluLayer{}, DenseLayer{5}};
  s.attention_layers = {4};
  return s;
}

NetworkSpec tiny_res_spec() {
  NetworkSpec s;
  s.in_channels = 2;
  s.in_height = 8;
  s.in_width = 8;
  s.num_classes = 4;
  s.layers = {ConvLayer{4, 3, 1, 1}, ReluLayer{}, ResidualLayer{6, 2},
              GlobalPoolLayer{}, DenseLayer{4}};
  s.attention_layers = {2};
  return s;
}

template <typename T>
Tensor<T> random_inputs(const NetworkSpec& spec, int n, uint64_t seed) {
  Rng rng = Rng::derive(seed, {7});
  Tensor<T> x({n, spec.in_channels, spec.in_height, spec.in_width});
  for (auto& v : x.data) v = static_cast<T>(rng.uniform());
  return x;
}

Mat<double> random_onehot(int n, int k, uint64_t seed) {
  Rng rng = Rng::derive(seed, {11});
  std::vector<int> cls(static_cast<size_t>(n));
  for (auto& c : cls) c = static_cast<int>(rng.below(static_cast<uint64_t>(k)));
  return onehot_rows<double>(cls, k);
}

// Central finite differences on a scalar-valued function of the parameters,
// probed at a spread of coordinates. This is the independent oracle for
// every analytic gradient below.
void check_gradient(const Engine<double>& engine, const Params<double>& at,
                    const std::function<double(const Params<double>&)>& f,
                    const Params<double>& analytic, double tol = 1e-4) {
  const double h = 1e-5;
  Params<double> w = at;
  size_t total = w.size();
  std::vector<size_t> probes;
  for (size_t i = 0; i < total; i += std::max<size_t>(1, total / 61))
    probes.push_back(i);
  probes.push_back(total - 1);
  double worst = 0.0;
  for (size_t i : probes) {
    double keep = w.values[i];
    w.values[i] = keep + h;
    double up = f(w);
    w.values[i] = keep - h;
    double down = f(w);
    w.values[i] = keep;
    double numeric = (up - down) / (2.0 * h);
    double a = analytic.values[i];
    double denom = std::max(1e-6, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  CHECK(worst < tol);
  (void)engine;
}

}  // namespace

TEST_CASE("flatten/unflatten round-trips exactly") {
  Engine<double> engine(tiny_cnn_spec());
  Rng rng = Rng::derive(3, {1});
  Params<double> p = engine.init_params(rng);
  auto tensors = unflatten(p);
  Params<double> back = flatten(engine.manifest(), tensors);
  REQUIRE(back.values.size() == p.values.size());
  for (size_t i = 0; i < p.values.size(); ++i)
    CHECK(back.values[i] == p.values[i]);
}

TEST_CASE("zero parameters give identical logits and uniform softmax") {
  Engine<float> engine(tiny_cnn_spec());
  Params<float> p = engine.zero_params();
  Tensor<float> x = random_inputs<float>(engine.spec(), 3, 5);
  Mat<float> z = engine.forward(p, x, nullptr);
  for (size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0f);
  Mat<float> probs = softmax(z);
  for (size_t i = 0; i < probs.size(); ++i)
    CHECK(probs[i] == doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("mnist architecture has about 0.2M parameters") {
  Engine<float> engine(NetworkSpec::mnist_cnn());
  CHECK(engine.param_count() > 150000);
  CHECK(engine.param_count() < 250000);
}

TEST_CASE("forward is deterministic") {
  Engine<float> engine(tiny_cnn_spec());
  Rng rng = Rng::derive(17, {1});
  Params<float> p = engine.init_params(rng);
  Tensor<float> x = random_inputs<float>(engine.spec(), 4, 23);
  Mat<float> a = engine.forward(p, x, nullptr);
  Mat<float> b = engine.forward(p, x, nullptr);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("forward validates parameter and input shapes") {
  Engine<float> engine(tiny_cnn_spec());
  Params<float> p = engine.zero_params();
  p.values.pop_back();
  Tensor<float> x = random_inputs<float>(engine.spec(), 1, 2);
  CHECK_THROWS_AS(engine.forward(p, x, nullptr), ConfigError);
  Params<float> ok = engine.zero_params();
  Tensor<float> bad({1, 1, 8, 8});
  CHECK_THROWS_AS(engine.forward(ok, bad, nullptr), ConfigError);
}

TEST_CASE("backward without a retained cache is a state error") {
  Engine<float> engine(tiny_cnn_spec());
  Params<float> p = engine.zero_params();
  Cache<float> cache;
  Mat<float> d({1, 5});
  CHECK_THROWS_AS(engine.backward(p, cache, d), StateError);
}

TEST_CASE("network spec text round-trips") {
  NetworkSpec s = NetworkSpec::cifar_resnet();
  NetworkSpec back = NetworkSpec::parse(s.to_text());
  CHECK(back.to_text() == s.to_text());
  CHECK(back.attention_layers == s.attention_layers);
}

TEST_CASE("spec validation reports the offending layer") {
  // maxpool after the activations have been flattened by dense
  NetworkSpec bad = tiny_cnn_spec();
  bad.layers.push_back(MaxPoolLayer{2, 2});
  CHECK_THROWS_WITH_AS((Engine<float>{bad}),
                       doctest::Contains("layer 6"), ConfigError);
  NetworkSpec bad_att = tiny_cnn_spec();
  bad_att.attention_layers = {5};  // dense output is flat
  CHECK_THROWS_AS((Engine<float>{bad_att}), ConfigError);
}

TEST_CASE("zero upstream gradient yields zero parameter gradient") {
  Engine<double> engine(tiny_cnn_spec());
  Rng rng = Rng::derive(29, {1});
  Params<double> p = engine.init_params(rng);
  Tensor<double> x = random_inputs<double>(engine.spec(), 2, 31);
  Cache<double> cache;
  engine.forward(p, x, &cache);
  Mat<double> d({2, 5});
  auto back = engine.backward(p, cache, d);
  for (double v : back.grads.values) CHECK(v == 0.0);
}

TEST_CASE("cross-entropy logit gradient at uniform softmax is p - y") {
  // closed form: dL/dz = softmax(z) - y for a single sample
  Mat<double> z({1, 4});
  Mat<double> p = softmax(z);
  Mat<double> y = onehot_rows<double>({2}, 4);
  for (int j = 0; j < 4; ++j) {
    double expect = p[static_cast<size_t>(j)] - y[static_cast<size_t>(j)];
    CHECK(expect == doctest::Approx(j == 2 ? 0.25 - 1.0 : 0.25));
  }
}

TEST_CASE("analytic gradients match finite differences") {
  Engine<double> engine(tiny_cnn_spec());
  REQUIRE(engine.param_count() < 10000);
  Rng rng = Rng::derive(101, {1});
  Params<double> w = engine.init_params(rng);
  Params<double> teacher = engine.init_params(rng);
  const int n = 3;
  Tensor<double> x = random_inputs<double>(engine.spec(), n, 41);
  Mat<double> y = random_onehot(n, 5, 43);
  const double tau = 3.0;
  const std::vector<int> layers = engine.attention_layers();

  SUBCASE("task loss") {
    auto f = [&](const Params<double>& p) {
      return task_loss(softmax(engine.forward(p, x, nullptr)), y);
    };
    Cache<double> cache;
    Mat<double> z = engine.forward(w, x, &cache);
    Mat<double> probs = softmax(z);
    Mat<double> d({n, 5});
    for (size_t j = 0; j < d.size(); ++j) d[j] = (probs[j] - y[j]) / n;
    auto analytic = engine.backward(w, cache, d).grads;
    check_gradient(engine, w, f, analytic);
  }

  SUBCASE("distillation loss, student side") {
    Mat<double> q_ref = softened(engine.forward(teacher, x, nullptr), tau);
    auto f = [&](const Params<double>& p) {
      return kd_loss(q_ref, softened(engine.forward(p, x, nullptr), tau));
    };
    Cache<double> cache;
    Mat<double> q = softened(engine.forward(w, x, &cache), tau);
    Mat<double> d({n, 5});
    for (size_t j = 0; j < d.size(); ++j)
      d[j] = (q[j] - q_ref[j]) / (tau * n);
    auto analytic = engine.backward(w, cache, d).grads;
    check_gradient(engine, w, f, analytic);
  }

  SUBCASE("distillation loss, teacher side") {
    Mat<double> q_student = softened(engine.forward(w, x, nullptr), tau);
    auto f = [&](const Params<double>& p) {
      return kd_loss(q_student, softened(engine.forward(p, x, nullptr), tau));
    };
    Cache<double> cache;
    Mat<double> q = softened(engine.forward(teacher, x, &cache), tau);
    Mat<double> d({n, 5});
    for (size_t j = 0; j < d.size(); ++j)
      d[j] = (q[j] - q_student[j]) / (tau * n);
    auto analytic = engine.backward(teacher, cache, d).grads;
    check_gradient(engine, teacher, f, analytic);
  }

  SUBCASE("attention loss, gradient-weighted maps") {
    std::vector<int> cls(static_cast<size_t>(n));
    for (int b = 0; b < n; ++b)
      for (int j = 0; j < 5; ++j)
        if (y[static_cast<size_t>(b) * 5 + j] > 0)
          cls[static_cast<size_t>(b)] = j;
    // teacher maps are constants; the learner's channel weights are not
    Cache<double> cache_t;
    engine.forward(teacher, x, &cache_t);
    std::vector<Tensor<double>> maps_t = reference_attention_maps(
        engine, teacher, cache_t, cls, layers, true);

    // the full loss recomputes the learner's channel weights per evaluation
    auto f = [&](const Params<double>& p) {
      Cache<double> c;
      engine.forward(p, x, &c);
      auto g = score_activation_grads(engine, p, c, cls, layers);
      double total = 0.0;
      for (size_t i = 0; i < layers.size(); ++i) {
        Tensor<double> map = attention_map_from_weights(
            c.layers[static_cast<size_t>(layers[i])].out,
            gradcam_channel_weights(g.at(layers[i])));
        total += attention_distance(maps_t[i], map);
      }
      return total;
    };

    Cache<double> cache_s;
    engine.forward(w, x, &cache_s);
    AttentionGrads<double> at = attention_loss_grads(
        engine, w, cache_s, x, cls, layers, maps_t, 1.0, true, 1e-4);
    Mat<double> zero({n, 5});
    BackwardOptions<double> opts;
    opts.extra_output_grads = &at.activation_grads;
    Params<double> analytic = engine.backward(w, cache_s, zero, opts).grads;
    REQUIRE(at.has_weight_route);
    for (size_t i = 0; i < analytic.values.size(); ++i)
      analytic.values[i] += at.weight_route.values[i];
    check_gradient(engine, w, f, analytic);
  }

  SUBCASE("attention loss, activation-sum maps") {
    std::vector<int> cls = {0, 1, 2};
    Cache<double> cache_t;
    engine.forward(teacher, x, &cache_t);
    std::vector<Tensor<double>> maps_t = reference_attention_maps(
        engine, teacher, cache_t, cls, layers, false);
    auto f = [&](const Params<double>& p) {
      Cache<double> c;
      engine.forward(p, x, &c);
      double total = 0.0;
      for (size_t i = 0; i < layers.size(); ++i)
        total += attention_distance(
            maps_t[i],
            nad_attention(c.layers[static_cast<size_t>(layers[i])].out));
      return total;
    };
    Cache<double> cache_s;
    engine.forward(w, x, &cache_s);
    AttentionGrads<double> at = attention_loss_grads(
        engine, w, cache_s, x, cls, layers, maps_t, 1.0, false, 1e-4);
    Mat<double> zero({n, 5});
    BackwardOptions<double> opts;
    opts.extra_output_grads = &at.activation_grads;
    Params<double> analytic = engine.backward(w, cache_s, zero, opts).grads;
    CHECK_FALSE(at.has_weight_route);
    check_gradient(engine, w, f, analytic);
  }
}

TEST_CASE("residual network gradients match finite differences") {
  Engine<double> engine(tiny_res_spec());
  REQUIRE(engine.param_count() < 10000);
  Rng rng = Rng::derive(211, {1});
  Params<double> w = engine.init_params(rng);
  const int n = 2;
  Tensor<double> x = random_inputs<double>(engine.spec(), n, 59);
  Mat<double> y = random_onehot(n, 4, 61);
  auto f = [&](const Params<double>& p) {
    return task_loss(softmax(engine.forward(p, x, nullptr)), y);
  };
  Cache<double> cache;
  Mat<double> z = engine.forward(w, x, &cache);
  Mat<double> probs = softmax(z);
  Mat<double> d({n, 4});
  for (size_t j = 0; j < d.size(); ++j) d[j] = (probs[j] - y[j]) / n;
  auto analytic = engine.backward(w, cache, d).grads;
  check_gradient(engine, w, f, analytic);
}

TEST_CASE("softmax and softened rows behave") {
  Mat<double> z({2, 4}, {0, 0, 0, 0, 3, -1, 2, 0.5});
  SUBCASE("rows sum to one within 1e-9 and entries lie in [0,1]") {
    for (double tau : {1.0, 2.0, 4.0}) {
      Mat<double> p = softened(z, tau);
      for (int b = 0; b < 2; ++b) {
        double sum = 0;
        for (int j = 0; j < 4; ++j) {
          double v = p[static_cast<size_t>(b) * 4 + j];
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
      }
    }
  }
  SUBCASE("uniform logits give 1/k") {
    Mat<double> p = softmax(z);
    for (int j = 0; j < 4; ++j)
      CHECK(p[static_cast<size_t>(j)] == doctest::Approx(0.25));
  }
  SUBCASE("softened with tau=1 equals softmax") {
    Mat<double> a = softmax(z);
    Mat<double> b = softened(z, 1.0);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
  SUBCASE("temperature raises entropy monotonically") {
    double prev = -1.0;
    for (double tau : {1.0, 2.0, 4.0}) {
      Mat<double> p = softened(z, tau);
      double entropy = 0;
      for (int j = 0; j < 4; ++j) {
        double v = p[4 + static_cast<size_t>(j)];
        entropy -= v * std::log(v);
      }
      CHECK(entropy > prev);
      prev = entropy;
    }
  }
  SUBCASE("tau must be positive") {
    CHECK_THROWS_AS(softened(z, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(softened(z, -2.0), std::invalid_argument);
  }
}

TEST_CASE("attention maps obey the stated identities") {
  const int n = 2, c = 3, h = 4, w = 4;
  Tensor<double> acts({n, c, h, w});
  Rng rng = Rng::derive(77, {1});
  for (auto& v : acts.data) v = rng.uniform(-1.0, 1.0);

  SUBCASE("zero channel weights give a zero map") {
    Mat<double> alpha({n, c});
    Tensor<double> map = attention_map_from_weights(acts, alpha);
    for (double v : map.data) CHECK(v == 0.0);
  }
  SUBCASE("single channel with unit weight gives relu of the activation") {
    Tensor<double> single({n, 1, h, w});
    std::copy_n(acts.ptr(), single.size(), single.ptr());
    Mat<double> alpha({n, 1});
    alpha.fill(1.0);
    Tensor<double> map = attention_map_from_weights(single, alpha);
    for (size_t i = 0; i < map.size(); ++i)
      CHECK(map[i] == std::max(single[i], 0.0));
  }
  SUBCASE("maps are entrywise nonnegative") {
    Mat<double> alpha({n, c});
    for (auto& v : alpha.data) v = rng.uniform(-2.0, 2.0);
    Tensor<double> map = attention_map_from_weights(acts, alpha);
    for (double v : map.data) CHECK(v >= 0.0);
  }
  SUBCASE("identical models give identical maps and zero distance") {
    Engine<double> engine(tiny_cnn_spec());
    Rng r2 = Rng::derive(78, {1});
    Params<double> p = engine.init_params(r2);
    Tensor<double> x = random_inputs<double>(engine.spec(), 2, 79);
    Tensor<double> a = attention_map(engine, p, x, {0, 1}, 4);
    Tensor<double> b = attention_map(engine, p, x, {0, 1}, 4);
    CHECK(attention_distance(a, b) == 0.0);
  }
  SUBCASE("attention map on a non-spatial layer is a configuration error") {
    Engine<double> engine(tiny_cnn_spec());
    Params<double> p = engine.zero_params();
    Tensor<double> x = random_inputs<double>(engine.spec(), 1, 80);
    CHECK_THROWS_AS(attention_map(engine, p, x, {0}, 5), ConfigError);
  }
}

TEST_CASE("nad attention identities") {
  const int n = 1, h = 3, w = 3;
  Tensor<double> one({n, 1, h, w});
  Rng rng = Rng::derive(88, {1});
  for (auto& v : one.data) v = rng.uniform(-1.0, 1.0);
  SUBCASE("single channel gives |A|") {
    Tensor<double> map = nad_attention(one);
    for (size_t i = 0; i < map.size(); ++i)
      CHECK(map[i] == std::abs(one[i]));
  }
  SUBCASE("channels A and -A give 2|A|") {
    Tensor<double> two({n, 2, h, w});
    std::copy_n(one.ptr(), one.size(), two.ptr());
    for (size_t i = 0; i < one.size(); ++i)
      two[one.size() + i] = -one[i];
    Tensor<double> map = nad_attention(two);
    for (size_t i = 0; i < map.size(); ++i)
      CHECK(map[i] == doctest::Approx(2.0 * std::abs(one[i])));
  }
  SUBCASE("zero activations give a zero map") {
    Tensor<double> z({n, 4, h, w});
    Tensor<double> map = nad_attention(z);
    for (double v : map.data) CHECK(v == 0.0);
  }
}

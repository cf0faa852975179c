#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "spfl/report.hpp"

using namespace spfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("spfl_report_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static int counter;
};
int TempDir::counter = 0;

std::vector<RoundRecord> sample_records() {
  std::vector<RoundRecord> records;
  for (int t = 0; t < 4; ++t) {
    RoundRecord r;
    r.round = t;
    r.ma = 0.5 + 0.1 * t;
    r.asr = 0.9 - 0.2 * t;
    r.ba = r.ma;
    r.client_ma = {r.ma, r.ma + 0.01};
    r.client_asr = {r.asr, r.asr - 0.01};
    records.push_back(r);
  }
  return records;
}

}  // namespace

TEST_CASE("metrics csv round-trips with the documented schema") {
  TempDir tmp;
  auto records = sample_records();
  write_metrics_csv(tmp.file("metrics.csv"), records);

  std::ifstream is(tmp.file("metrics.csv"));
  std::string header;
  std::getline(is, header);
  CHECK(header == "round,ma,asr,ba,ma_c0,asr_c0,ma_c1,asr_c1");
  std::string row;
  std::getline(is, row);
  CHECK(row.substr(0, 2) == "0,");
  CHECK(row.find("0.500000") != std::string::npos);  // 6 decimal places

  auto back = read_metrics_csv(tmp.file("metrics.csv"));
  REQUIRE(back.size() == records.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].round == records[i].round);
    CHECK(back[i].ma == doctest::Approx(records[i].ma));
    CHECK(back[i].asr == doctest::Approx(records[i].asr));
    CHECK(back[i].client_ma.size() == 2);
  }
}

TEST_CASE("metrics reader rejects junk") {
  TempDir tmp;
  {
    std::ofstream os(tmp.file("bad.csv"));
    os << "time,acc\n1,2\n";
  }
  CHECK_THROWS_AS(read_metrics_csv(tmp.file("bad.csv")), FormatError);
  {
    std::ofstream os(tmp.file("empty.csv"));
    os << "round,ma,asr,ba\n";
  }
  CHECK_THROWS_AS(read_metrics_csv(tmp.file("empty.csv")), FormatError);
}

TEST_CASE("line charts render one polyline per series") {
  TempDir tmp;
  std::vector<ChartSeries> series = {
      {"FedAvg", {0.1, 0.5, 0.8, 0.9}},
      {"SPFL", {0.1, 0.6, 0.85, 0.95}},
  };
  write_line_chart_svg(tmp.file("ma.svg"), "Main task accuracy", "MA", series);
  std::ifstream is(tmp.file("ma.svg"));
  std::string body((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  CHECK(body.find("<svg") != std::string::npos);
  CHECK(std::count(body.begin(), body.end(), '\n') > 5);
  size_t polylines = 0;
  for (size_t pos = body.find("<polyline"); pos != std::string::npos;
       pos = body.find("<polyline", pos + 1))
    ++polylines;
  CHECK(polylines == 2);
  CHECK(body.find("FedAvg") != std::string::npos);
  CHECK(body.find("SPFL") != std::string::npos);
  SUBCASE("empty series is an error") {
    CHECK_THROWS_AS(write_line_chart_svg(tmp.file("x.svg"), "t", "y", {}),
                    FormatError);
  }
}

TEST_CASE("portable image writers produce valid headers") {
  TempDir tmp;
  std::vector<float> gray(16, 0.5f);
  write_pgm(tmp.file("g.pgm"), gray, 4, 4);
  std::ifstream pg(tmp.file("g.pgm"), std::ios::binary);
  std::string magic;
  pg >> magic;
  CHECK(magic == "P5");

  std::vector<float> rgb(4 * 4 * 3, 0.25f);
  write_ppm(tmp.file("c.ppm"), rgb, 4, 4);
  std::ifstream pp(tmp.file("c.ppm"), std::ios::binary);
  pp >> magic;
  CHECK(magic == "P6");
  CHECK(fs::file_size(tmp.file("c.ppm")) > 4 * 4 * 3);
}

TEST_CASE("bilinear upsampling preserves constants and corners") {
  std::vector<float> src = {0.0f, 1.0f, 1.0f, 0.0f};
  auto up = upsample_bilinear(src.data(), 2, 2, 8, 8);
  CHECK(up.size() == 64);
  CHECK(up[0] == doctest::Approx(0.0));
  CHECK(up[7] == doctest::Approx(1.0));
  CHECK(up[56] == doctest::Approx(1.0));
  CHECK(up[63] == doctest::Approx(0.0));
  std::vector<float> flat(9, 0.7f);
  auto upflat = upsample_bilinear(flat.data(), 3, 3, 5, 7);
  for (float v : upflat) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("attention report writes overlays and a distance score") {
  TempDir tmp;
  NetworkSpec spec;
  spec.in_channels = 1;
  spec.in_height = 12;
  spec.in_width = 12;
  spec.num_classes = 4;
  spec.layers = {ConvLayer{3, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{2, 2},
                 DenseLayer{4}};
  spec.attention_layers = {2};
  Engine<float> engine(spec);
  Rng rng = Rng::derive(7, {1});
  Params<float> params = engine.init_params(rng);

  Tensor<float> inputs({3, 1, 12, 12});
  for (auto& v : inputs.data) v = static_cast<float>(rng.uniform());
  TriggerSpec trigger = TriggerSpec::square(2, 1.0f, 10, 10, 0, "t");

  AttentionReport rep = attention_report(engine, params, inputs, trigger,
                                         tmp.file("att"), 2);
  CHECK(rep.images.size() == 4);  // clean + triggered for 2 samples
  for (const auto& f : rep.images) CHECK(fs::exists(f));
  CHECK(rep.mean_distance >= 0.0);

  SUBCASE("identical inputs give zero distance") {
    // trigger that rewrites nothing: value matches existing pixels
    Tensor<float> ones({2, 1, 12, 12});
    ones.fill(1.0f);
    TriggerSpec noop = TriggerSpec::square(2, 1.0f, 0, 0, 0, "noop");
    AttentionReport same =
        attention_report(engine, params, ones, noop, tmp.file("att2"), 1);
    CHECK(same.mean_distance == doctest::Approx(0.0));
  }
}

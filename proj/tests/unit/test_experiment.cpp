#include "helpers.hpp"
#include "safeclip/experiment.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <sstream>

using namespace safeclip;
using json = nlohmann::ordered_json;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string l;
  std::getline(in, l);
  return l;
}

// The smoke preset, shrunk further so a full run takes a few seconds.
ExperimentConfig tiny_smoke() {
  auto c = preset("smoke");
  c.corpus.n_pairs = 600;
  c.corpus.class_count = 4;
  c.corpus.vocab_size = 40;
  c.model.hidden = 16;
  c.model.embed_dim = 8;
  c.model.d = 8;
  c.train.pool_capacity = 64;
  c.train.batch_size = 32;
  c.train.gmm_threshold = 0.5;
  c.eval = {10, 8, 8, 4, true};
  return c;
}

void expect_config_error(const std::string& text, const std::string& needle) {
  try {
    parse_config(text, "cfg.json");
    FAIL("expected a ConfigError containing: " << needle);
  } catch (const ConfigError& e) {
    CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
  }
}

const char* kMinimal = R"({
  "schema_version": 1,
  "name": "m",
  "seed": 4,
  "corpus": {"n_pairs": 100, "class_count": 3},
  "trainers": ["clip_baseline"]
})";

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("every preset round-trips through its canonical form") {
    for (const auto& name : preset_names()) {
      const auto c = preset(name);
      const auto text = serialize_config(c);
      const auto back = parse_config(text);
      CHECK_MESSAGE(back == c, name);
      CHECK(serialize_config(back) == text);
    }
    CHECK_THROWS_AS(preset("nope"), ConfigError);
  }

  TEST_CASE("minimal config fills defaults") {
    const auto c = parse_config(kMinimal);
    CHECK(c.name == "m");
    CHECK(c.seed == 4);
    CHECK(c.corpus.n_pairs == 100);
    CHECK(c.trainers == std::vector<TrainerKind>{TrainerKind::clip_baseline});
    CHECK(c.train.lr_low == doctest::Approx(c.train.lr / 100.0));
    CHECK(c.attacks.empty());
  }

  TEST_CASE("unknown keys are errors with their path") {
    auto j = json::parse(kMinimal);
    j["trian"] = json::object();
    expect_config_error(j.dump(), "unknown field 'trian'");
    j = json::parse(kMinimal);
    j["train"] = {{"lr", 0.1}, {"warmup", 3}};
    expect_config_error(j.dump(), "unknown field 'train.warmup'");
  }

  TEST_CASE("missing and mistyped fields are named") {
    auto j = json::parse(kMinimal);
    j.erase("seed");
    expect_config_error(j.dump(), "missing required field 'seed'");
    j = json::parse(kMinimal);
    j["corpus"].erase("n_pairs");
    expect_config_error(j.dump(), "corpus.n_pairs");
    j = json::parse(kMinimal);
    j["train"] = {{"lr", "fast"}};
    expect_config_error(j.dump(), "train.lr");
    j = json::parse(kMinimal);
    j["schema_version"] = 2;
    expect_config_error(j.dump(), "schema_version");
    j = json::parse(kMinimal);
    j["trainers"] = {"clip_baseline", "clip_baseline"};
    expect_config_error(j.dump(), "trainers");
  }

  TEST_CASE("malformed JSON reports line and column") {
    expect_config_error("{\n  \"name\": \"x\",\n  \"seed\": ,\n}", "cfg.json:3:");
    expect_config_error("", "cfg.json:1:");
  }

  TEST_CASE("semantic validation runs at parse time") {
    auto j = json::parse(kMinimal);
    j["trainers"] = {"safeclip"};
    j["train"] = {{"warmup_epochs", 5}, {"total_epochs", 5}};
    expect_config_error(j.dump(), "warmup_epochs");
  }

  TEST_CASE("config hash ignores output_dir and tracks everything else") {
    auto c = preset("smoke");
    const auto h = config_hash(c);
    CHECK(h.size() == 64);
    c.output_dir = "/tmp/elsewhere";
    CHECK(config_hash(c) == h);
    c.seed = 2;
    CHECK(config_hash(c) != h);
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("seeds are derived from the top-level seed") {
    auto c = preset("smoke");
    const auto a = resolved_corpus_spec(c).seed;
    const auto m = model_seed(c);
    CHECK(a != m);
    c.seed = 2;
    CHECK(resolved_corpus_spec(c).seed != a);
    CHECK(model_seed(c) != m);
  }

  TEST_CASE("empty suite gives an empty report") {
    testutil::TempDir dir("suite");
    const auto s = parse_suite(R"({"schema_version": 1, "base": "preset:smoke", "sweeps": []})");
    CHECK(s.base == preset("smoke"));
    RunOptions quiet;
    quiet.verbosity = Verbosity::quiet;
    CHECK(run_ablation_suite(s, dir.path(), quiet).empty());
    CHECK_THROWS_AS(parse_suite(R"({"schema_version": 1, "base": "preset:smoke", "sweeps": [{"axis": "lr", "values": [1]}]})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_suite(R"({"schema_version": 1, "base": "preset:smoke", "sweeps": [{"axis": "ablation", "values": []}]})"),
                    ConfigError);
  }

  TEST_CASE("a run is reproducible and its artifacts carry the config hash") {
    testutil::TempDir a("runa"), b("runb");
    const auto c = tiny_smoke();
    RunOptions quiet;
    quiet.verbosity = Verbosity::quiet;
    const auto ra = run_experiment(c, a.path(), quiet);
    const auto rb = run_experiment(c, b.path(), quiet);
    CHECK(ra.summary_json == rb.summary_json);
    CHECK(read_file(a.path() / "corpus.bin") == read_file(b.path() / "corpus.bin"));
    CHECK(read_file(a.path() / "metrics.csv") == read_file(b.path() / "metrics.csv"));

    const auto hash = config_hash(c);
    const auto summary = json::parse(ra.summary_json);
    CHECK(summary["config_hash"] == hash);
    CHECK(first_line(a.path() / "metrics.csv") == "# config " + hash);
    CHECK(first_line(a.path() / "plot_data.csv") == "# config " + hash);
    CHECK(json::parse(first_line(a.path() / "metrics.jsonl"))["config_hash"] == hash);
    CHECK(load_config(a.path() / "config.json") == c);

    std::size_t partitions = 0;
    for (const auto& e : std::filesystem::directory_iterator(a.path() / "partitions")) {
      ++partitions;
      CHECK(first_line(e.path()).find("config " + hash) != std::string::npos);
    }
    CHECK(partitions >= 1);
    std::string tag;
    load_checkpoint(a.path() / "checkpoints" / "safeclip_final.ckpt", &tag);
    CHECK(tag == "config " + hash);

    const auto manifest = json::parse(read_file(a.path() / "manifest.json"));
    for (const auto& f : manifest["artifacts"]) {
      const auto path = a.path() / f["path"].get<std::string>();
      REQUIRE(std::filesystem::exists(path));
      CHECK(f["sha256"] == sha256_hex(read_file(path)));
    }
    CHECK(load_corpus(a.path() / "corpus.bin") == build_corpus(c));
  }

  TEST_CASE("checks are evaluated against the summary") {
    testutil::TempDir dir("checks");
    auto c = tiny_smoke();
    c.trainers = {TrainerKind::clip_baseline};
    c.clean_reference = false;
    c.checks.baseline_min_asr = 2.0;  // unreachable
    RunOptions quiet;
    quiet.verbosity = Verbosity::quiet;
    const auto r = run_experiment(c, dir.path(), quiet);
    REQUIRE(r.checks.size() == 1);
    CHECK_FALSE(r.checks[0].passed);
    CHECK_FALSE(r.checks_passed());
  }

  TEST_CASE("shipped preset files match the built-in presets") {
    const std::filesystem::path dir = std::filesystem::path(SAFECLIP_SOURCE_DIR) / "presets";
    std::size_t configs = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      const auto stem = e.path().stem().string();
      if (stem.find("suite") != std::string::npos) {
        CHECK_NOTHROW(load_suite(e.path()));
        continue;
      }
      ++configs;
      CHECK_MESSAGE(load_config(e.path()) == preset(stem), stem);
    }
    CHECK(configs == preset_names().size());
  }
}

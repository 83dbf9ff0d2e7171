#include "doctest.h"

#include "codequant/error.hpp"
#include "codequant/pipeline.hpp"

using namespace codequant;

namespace {

PipelineConfig quick(PipelineMode mode, std::uint64_t seed) {
    PipelineConfig c;
    c.model.seed = seed;
    c.mode = mode;
    c.aos.iterations = 16;
    c.aos.calib_tokens = 256;
    c.accf.iterations = 8;
    c.accf.calib_tokens = 128;
    c.eval_tokens = 128;
    return c;
}

LayerTrace with_selection(std::vector<std::vector<std::uint32_t>> sel) {
    LayerTrace lt;
    lt.selected = std::move(sel);
    return lt;
}

}  // namespace

TEST_CASE("config parsing") {
    const PipelineConfig c = parse_pipeline_config(
        "# desk run\n"
        "seed = 7\n"
        "mode = kmeans-only   # baseline\n"
        "k = 8\n"
        "pog.enabled = true\n"
        "eval.seeds = 1, 3\n"
        "\n");
    CHECK(c.model.seed == 7);
    CHECK(c.mode == PipelineMode::kmeans_only);
    CHECK(c.k == 8);
    CHECK(c.weight_bits() == 3);
    CHECK(c.pog_enabled);
    CHECK(c.pog_group() == 16);
    CHECK(c.pog_subgroup() == 2);
    CHECK(c.eval_splits == std::vector<std::uint64_t>{1, 3});

    const PipelineConfig back = parse_pipeline_config(c.to_text());
    CHECK(back.to_text() == c.to_text());

    CHECK_THROWS_AS(parse_pipeline_config("colour = red\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("k = 8\nk = 16\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("k = 5\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("k = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("abits = 6\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("mode = gptq\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("just words\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("granularity = embedding-wise\npog.enabled = true\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("group = 24\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("eval.seeds = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("eval.seeds = 2,2\n"), ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config("model.n_heads = 3\n"), ConfigError);
    CHECK_THROWS_AS(load_pipeline_config("/nonexistent/run.cfg"), FormatError);
}

TEST_CASE("router change rate") {
    ActivationTrace a, b;
    a.layers.push_back(with_selection({{0, 1}, {2, 3}}));
    b.layers.push_back(with_selection({{1, 0}, {0, 1}}));
    CHECK(router_change_rate(a, a, 2) == std::vector<double>{0.0});
    CHECK(router_change_rate(a, b, 2) == std::vector<double>{0.5});

    ActivationTrace c, d;
    c.layers.push_back(with_selection({{0, 3}}));
    d.layers.push_back(with_selection({{3, 2}}));
    CHECK(router_change_rate(c, d, 2) == std::vector<double>{0.5});
    d.layers[0].selected = {{1, 2}};
    CHECK(router_change_rate(c, d, 2) == std::vector<double>{1.0});
}

TEST_CASE("output error") {
    Rng rng(1);
    ActivationTrace a, b;
    LayerTrace lt;
    lt.output = gaussian_matrix(5, 4, rng);
    a.layers.push_back(lt);
    lt.output = scale(lt.output, 2.0);
    b.layers.push_back(lt);
    CHECK(layer_output_error(a, a) == std::vector<double>{0.0});
    CHECK(layer_output_error(a, b)[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(relative_error(Matrix(2, 2), Matrix(2, 2)) == 0.0);
}

TEST_CASE("evaluating the original model against itself at 8 bits") {
    ModelConfig mc;
    const ModelWeights w = generate_synthetic_model(mc, {.outlier_channels = 4, .outlier_scale = 1.0});
    const SplitEval ev = evaluate(w, w, generate_calibration(mc, 64, 1), 8);
    CHECK(ev.final_error < 0.05);
    CHECK(ev.layer_error.size() == mc.layers);
    for (double e : ev.layer_error) CHECK(e >= 0.0);
}

TEST_CASE("8-bit RTN on a tame model") {
    PipelineConfig c = quick(PipelineMode::rtn, 2);
    c.synthetic.outlier_scale = 1.0;
    c.abits = 8;
    c.wbits = 8;
    const PipelineResult r = run_pipeline(c);
    CHECK(r.model.has_stage("rtn"));
    CHECK(r.report.final_error() < 1e-2);
}

TEST_CASE("pipeline modes produce the expected stages") {
    for (auto mode : {PipelineMode::rtn, PipelineMode::random_rot_rtn, PipelineMode::kmeans_only, PipelineMode::codequant}) {
        PipelineConfig c = quick(mode, 1);
        c.pog_enabled = mode == PipelineMode::codequant;
        const PipelineResult r = run_pipeline(c);
        CHECK(r.model.metadata.at("pipeline.mode") == mode_name(mode));
        CHECK(r.model.rotation.has_value() == (mode != PipelineMode::rtn));
        CHECK(r.model.layers[0].router.rows() == c.model.d_model);
        CHECK(std::isfinite(r.report.final_error()));
        const std::string text = r.report.to_text();
        CHECK(text.find("[summary]") != std::string::npos);
        CHECK((text.find("[aos]") != std::string::npos) ==
              (mode == PipelineMode::codequant || mode == PipelineMode::kmeans_only));
        CHECK((text.find("[pog.experts]") != std::string::npos) == c.pog_enabled);
        CHECK((text.find("[accf]") != std::string::npos) == (mode == PipelineMode::codequant));
        if (mode == PipelineMode::codequant) {
            CHECK(r.model.has_stage("pog"));
            CHECK(r.model.has_stage("accf"));
            for (const auto& s : r.report.calibration.sites) CHECK(s.best_loss() <= s.initial_loss());
        }
    }
}

TEST_CASE("reports are a pure function of the config") {
    const PipelineConfig c = quick(PipelineMode::codequant, 3);
    const PipelineResult a = run_pipeline(c);
    const PipelineResult b = run_pipeline(c);
    CHECK(a.report.to_text() == b.report.to_text());
    CHECK(serialize_model(a.model) == serialize_model(b.model));
}

TEST_CASE("codequant beats RTN at 8-bit activations on tame models") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PipelineConfig c = quick(PipelineMode::codequant, seed);
        c.synthetic.outlier_scale = 1.0;
        c.abits = 8;
        const double cq = run_pipeline(c).report.final_error();
        c.mode = PipelineMode::rtn;
        const double rtn = run_pipeline(c).report.final_error();
        CHECK_MESSAGE(cq < rtn, "seed " << seed << ": codequant " << cq << " rtn " << rtn);
    }
}

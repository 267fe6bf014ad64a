#include "doctest.h"

#include <cmath>

#include "fact/sampler.hpp"
#include "support.hpp"

using namespace fact;

namespace {

ModelConfig tiny() {
    ModelConfig mc;
    mc.unet.d_model = 16;
    mc.unet.latent_height = 4;
    mc.unet.latent_width = 4;
    mc.unet.n_timesteps = 20;
    mc.projection.d_model = 16;
    mc.projection.blocks = 1;
    return mc;
}

void set_gates(FaceAdapterModel<double>& model, double gamma) {
    for (const auto& d : model.blocks())
        for (ParamId p : model.gsa_parameters(d.index))
            if (model.params()[p].name.find("gamma") != std::string::npos) model.params()[p].value(0, 0) = gamma;
}

Conditioning<double> conditioning(const FaceAdapterModel<double>& model, std::uint64_t id_seed) {
    Conditioning<double> c;
    c.text = model.text_embedding(1);
    c.identity = identity_embedding(model, testing::random_matrix(64, 32, id_seed));
    return c;
}

SamplerConfig config(int steps = 5) {
    SamplerConfig s;
    s.steps = steps;
    s.seed = 3;
    return s;
}

}  // namespace

TEST_CASE("cfg_combine: lambda = 0, equal branches, the 4.5 hand case") {
    const auto a = testing::random_matrix(3, 4, 1), b = testing::random_matrix(3, 4, 2);
    CHECK(cfg_combine(a, b, 0.0) == a);
    for (double l : {0.5, 7.0, 100.0}) CHECK(cfg_combine(a, a, l) == a);
    const Matrix<double> one = Matrix<double>::Ones(2, 2), half = Matrix<double>::Constant(2, 2, 0.5);
    CHECK(cfg_combine(one, half, 7.0) == Matrix<double>::Constant(2, 2, 4.5));
    CHECK_THROWS_AS(cfg_combine(a, testing::random_matrix(2, 4, 3), 1.0), InvalidInput);
}

TEST_CASE("cfg_combine equals (1 + l) cond - l uncond and is linear") {
    const auto a = testing::random_matrix(3, 4, 4), b = testing::random_matrix(3, 4, 5);
    const auto c = testing::random_matrix(3, 4, 6), d = testing::random_matrix(3, 4, 7);
    const double l = 7.0;
    CHECK((cfg_combine(a, b, l) - ((1 + l) * a - l * b)).cwiseAbs().maxCoeff() < 1e-12);
    const Matrix<double> lhs = cfg_combine(Matrix<double>(2 * a + c), Matrix<double>(2 * b + d), l);
    const Matrix<double> rhs = 2 * cfg_combine(a, b, l) + cfg_combine(c, d, l);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sampling timesteps: full, strided, single") {
    auto full = sampling_timesteps(10, 0);
    CHECK(full.size() == 10);
    CHECK(full.front() == 9);
    CHECK(full.back() == 0);
    auto strided = sampling_timesteps(100, 5);
    CHECK(strided == std::vector<int>{99, 74, 50, 25, 0});
    CHECK(sampling_timesteps(100, 1) == std::vector<int>{99});
}

TEST_CASE("ddpm_step matches the textbook reverse step") {
    const auto s = make_linear_schedule(20, 1e-3, 0.2);
    const auto z = testing::random_matrix(4, 3, 8, 0.3), eps = testing::random_matrix(4, 3, 9, 0.3);
    const auto noise = testing::random_matrix(4, 3, 10);
    const int t = 7;
    // mu = (z - beta_t / sqrt(1 - abar_t) eps) / sqrt(1 - beta_t), sigma^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
    const double beta = s.betas[t], abar = s.alphas_cumprod[t], abar_prev = s.alphas_cumprod[t - 1];
    const Matrix<double> mu = (z - beta / std::sqrt(1 - abar) * eps) / std::sqrt(1 - beta);
    const Matrix<double> expected = mu + std::sqrt(beta * (1 - abar_prev) / (1 - abar)) * noise;
    CHECK((ddpm_step(s, z, t, t - 1, eps, noise, false) - expected).cwiseAbs().maxCoeff() < 1e-12);

    // Final step returns the denoised estimate with no noise.
    const Matrix<double> x0 = (z - std::sqrt(1 - s.alphas_cumprod[0]) * eps) / std::sqrt(s.alphas_cumprod[0]);
    CHECK((ddpm_step(s, z, 0, -1, eps, noise, false) - x0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("one-step sampler output equals the hand-computed denoised latent") {
    FaceAdapterModel<double> model(tiny());
    auto cfg = config(1);
    cfg.cfg_scale = 0.0;
    cfg.clip_denoised = false;
    Conditioning<double> c;
    c.text = model.text_embedding(0);
    const int t = model.unet().n_timesteps - 1;
    // Rebuild the initial noise the way the sampler draws it, from an independent copy of the stream.
    Rng init = make_stream(cfg.seed, {0x1A17});
    const Matrix<double> z = randn<double>(16, 4, init);
    const Matrix<double> eps = predict_noise(model, z, t, c.text, static_cast<const Matrix<double>*>(nullptr), AdapterScale(cfg.alpha));
    const double abar = model.schedule().alphas_cumprod[t];
    const Matrix<double> expected = (z - std::sqrt(1 - abar) * eps) / std::sqrt(abar);
    CHECK((generate(model, c, cfg) - expected).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("generate: deterministic, zero gates with shared text equal the base model") {
    FaceAdapterModel<double> model(tiny());
    auto c = conditioning(model, 1);
    const auto cfg = config();
    CHECK(generate(model, c, cfg) == generate(model, c, cfg));

    // Both branches share the text; with zero gates the identity has no effect, so the
    // guided result equals an unguided text-only run.
    c.negative_text = c.text;
    Conditioning<double> plain;
    plain.text = c.text;
    auto unguided = cfg;
    unguided.cfg_scale = 0.0;
    CHECK((generate(model, c, cfg) - generate(model, plain, unguided)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("generate with alpha = 0 ignores the identity") {
    FaceAdapterModel<double> model(tiny());
    set_gates(model, 0.9);
    auto cfg = config();
    cfg.alpha = 0.0;
    CHECK(generate(model, conditioning(model, 1), cfg) == generate(model, conditioning(model, 2), cfg));
    cfg.alpha = 0.5;
    CHECK(generate(model, conditioning(model, 1), cfg) != generate(model, conditioning(model, 2), cfg));
}

TEST_CASE("cfg in latent space agrees with epsilon space when clipping is off") {
    // With no clipping both forms are affine in the noise estimate with the same coefficients.
    FaceAdapterModel<double> model(tiny());
    set_gates(model, 0.5);
    auto c = conditioning(model, 1);
    auto a = config(), b = config();
    a.clip_denoised = b.clip_denoised = false;
    b.space = CfgSpace::latent;
    CHECK((generate(model, c, a) - generate(model, c, b)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("inpaint: zero mask returns the template, full mask equals generate, half mask keeps the outside") {
    FaceAdapterModel<double> model(tiny());
    set_gates(model, 0.6);
    const auto c = conditioning(model, 4);
    const auto cfg = config();
    const auto tmpl = testing::random_matrix(16, 4, 11, 0.5);
    CHECK(inpaint(model, tmpl, MaskGrid::Zero(4, 4), c, cfg) == tmpl);
    CHECK(inpaint(model, tmpl, MaskGrid::Ones(4, 4), c, cfg) == generate(model, c, cfg));

    MaskGrid half = MaskGrid::Zero(4, 4);
    half.leftCols(2).setOnes();
    const auto out = inpaint(model, tmpl, half, c, cfg);
    for (int i = 0; i < 16; ++i) {
        if (half.data()[i] == 0.0) CHECK(out.row(i) == tmpl.row(i));
    }
    CHECK(out != tmpl);
}

TEST_CASE("inpaint rejects mismatched shapes") {
    FaceAdapterModel<double> model(tiny());
    const auto c = conditioning(model, 4);
    CHECK_THROWS_AS(inpaint(model, testing::random_matrix(9, 4, 1), MaskGrid::Zero(4, 4), c, config()), InvalidInput);
    CHECK_THROWS_AS(inpaint(model, testing::random_matrix(16, 4, 1), MaskGrid::Zero(3, 3), c, config()), InvalidInput);
}

TEST_CASE("increment profile: zero gates give zeros, otherwise each block peaks at exactly 1") {
    FaceAdapterModel<double> model(tiny());
    const auto c = conditioning(model, 5);
    auto zero = increment_profile(model, c, config());
    CHECK(zero.per_block.size() == model.blocks().size());
    for (const auto& [b, g] : zero.per_block) CHECK(g.isZero(0.0));

    set_gates(model, 0.7);
    auto prof = increment_profile(model, c, config());
    for (const auto& [b, g] : prof.per_block) {
        CHECK(g.maxCoeff() == 1.0);
        CHECK(g.minCoeff() >= 0.0);
        CHECK(g.rows() == model.blocks()[b].grid.height);
    }
}

TEST_CASE("increment profile is invariant to rescaling the raw increments") {
    // With alpha = 0 the trajectory ignores the adapters, and the gate scales every increment
    // by the same factor, so the normalized maps must not change.
    FaceAdapterModel<double> model(tiny());
    const auto c = conditioning(model, 6);
    auto cfg = config();
    cfg.alpha = 0.0;
    set_gates(model, 0.2);
    const auto a = increment_profile(model, c, cfg);
    set_gates(model, 1.3);
    const auto b = increment_profile(model, c, cfg);
    for (const auto& [blk, g] : a.per_block) CHECK((g - b.per_block.at(blk)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("profile JSON round trip and malformed input") {
    IncrementProfile p;
    MaskGrid g(2, 3);
    g << 0, 0.25, 1, 0.5, 0.125, 0.75;
    p.per_block[3] = g;
    p.per_block[0] = MaskGrid::Ones(1, 1);
    const auto back = profile_from_json(profile_to_json(p));
    REQUIRE(back.per_block.size() == 2);
    CHECK(back.per_block.at(3) == g);
    CHECK_THROWS_AS(profile_from_json("{\"x\": 1}"), LoadError);
}

TEST_CASE("sampler config validation") {
    SamplerConfig s;
    s.cfg_scale = -1;
    CHECK_THROWS_AS(s.validate(), InvalidConfig);
    s = SamplerConfig{};
    s.alpha = 3.0;
    CHECK_THROWS_AS(s.validate(), InvalidConfig);
    CHECK(parse_cfg_space("latent") == CfgSpace::latent);
    CHECK_THROWS_AS(parse_cfg_space("x0"), InvalidConfig);
}

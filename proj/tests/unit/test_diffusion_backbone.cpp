#include "doctest.h"

#include <cmath>

#include "fact/diffusion_backbone.hpp"
#include "support.hpp"

using namespace fact;

namespace {

ModelConfig small_config() {
    ModelConfig mc;
    mc.unet.d_model = 16;
    mc.unet.latent_height = 4;
    mc.unet.latent_width = 4;
    mc.projection.d_model = 16;
    mc.projection.blocks = 1;
    return mc;
}

}  // namespace

TEST_CASE("linear schedule endpoints and cumulative product") {
    auto s = make_linear_schedule(100, 1e-3, 0.2);
    CHECK(s.size() == 100);
    CHECK(s.betas.front() == 1e-3);
    CHECK(s.betas.back() == doctest::Approx(0.2).epsilon(1e-15));
    double prod = 1;
    for (int t = 0; t < 100; ++t) prod *= 1 - s.betas[t];
    CHECK(s.alphas_cumprod.back() == doctest::Approx(prod).epsilon(1e-14));
    for (int t = 1; t < 100; ++t) CHECK(s.alphas_cumprod[t] < s.alphas_cumprod[t - 1]);
}

TEST_CASE("add_noise examples") {
    Matrix<double> z0 = Matrix<double>::Constant(2, 2, 3.0), eps = Matrix<double>::Constant(2, 2, -1.0);
    CHECK(add_noise(z0, eps, 1.0) == z0);
    CHECK(add_noise(z0, eps, 0.0) == eps);
    CHECK(add_noise(z0, eps, 0.25)(0, 0) == doctest::Approx(0.5 * 3.0 - std::sqrt(0.75)).epsilon(1e-15));
    auto s = make_linear_schedule(10, 0.01, 0.1);
    CHECK_THROWS_AS(add_noise(z0, 10, eps, s), InvalidInput);
    CHECK_THROWS_AS(add_noise(z0, -1, eps, s), InvalidInput);
    CHECK_THROWS_AS(add_noise(z0, Matrix<double>(Matrix<double>::Zero(3, 2)), 0.5), InvalidInput);
}

TEST_CASE("add_noise preserves the expected second moment") {
    // E||z_t||^2 = abar ||z0||^2 + (1 - abar) n
    const auto z0 = testing::random_matrix(4, 4, 1);
    const double abar = 0.3;
    Rng rng = make_stream(2, {});
    double acc = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += add_noise(z0, randn<double>(4, 4, rng), abar).squaredNorm();
    const double expected = abar * z0.squaredNorm() + (1 - abar) * 16;
    CHECK(std::abs(acc / n - expected) < 0.05 * expected);
}

TEST_CASE("block layout: 2 levels x 2 blocks on 8x8") {
    UNetConfig u;
    auto layout = block_layout(u);
    REQUIRE(layout.size() == 6);
    for (int i : {0, 1, 4, 5}) CHECK(layout[i].grid == GridShape{8, 8});
    for (int i : {2, 3}) CHECK(layout[i].grid == GridShape{4, 4});
    u.gsa_blocks = {1, 3};
    int with_gsa = 0;
    for (const auto& d : block_layout(u)) with_gsa += d.has_gsa;
    CHECK(with_gsa == 2);
}

TEST_CASE("config validation") {
    UNetConfig u;
    u.heads = 3;
    CHECK_THROWS_AS(u.validate(), InvalidConfig);
    u = UNetConfig{};
    u.gsa_blocks = {6};
    CHECK_THROWS_AS(u.validate(), InvalidConfig);
    u = UNetConfig{};
    u.beta_end = 1.0;
    CHECK_THROWS_AS(u.validate(), InvalidConfig);
}

TEST_CASE("trainable parameters: adapters plus projection; everything else frozen") {
    ModelConfig mc;
    FaceAdapterModel<float> model(mc);
    const auto trainable = model.trainable_parameters();
    const std::size_t projection = 4 + 13 * std::size_t(mc.projection.blocks);
    CHECK(trainable.size() == model.blocks().size() * kGsaTensorCount + projection);
    for (ParamId id : trainable) CHECK(model.params()[id].role == Role::trainable);
    std::size_t n_trainable = model.params().with_role(Role::trainable).size();
    CHECK(n_trainable == trainable.size() + model.null_embedding_parameters().size());
    for (const auto& p : model.params()) {
        if (p.name.rfind("unet.", 0) == 0 && p.name.find(".gsa.") == std::string::npos) CHECK(p.role == Role::frozen);
    }
}

TEST_CASE("null identity and gates start at zero") {
    FaceAdapterModel<double> model(small_config());
    for (ParamId id : model.null_embedding_parameters()) {
        CHECK(model.params()[id].value.isZero(0.0));
        CHECK(model.params()[id].value.rows() == 4);
        CHECK(model.params()[id].value.cols() == 16);
    }
    for (const auto& d : model.blocks())
        for (ParamId id : model.gsa_parameters(d.index))
            if (model.params()[id].name.find("gamma") != std::string::npos) CHECK(model.params()[id].value(0, 0) == 0.0);
}

TEST_CASE("base weights do not depend on the projection configuration") {
    auto a = small_config(), b = small_config();
    b.projection.blocks = 3;
    FaceAdapterModel<double> ma(a), mb(b);
    for (const auto& p : ma.params()) {
        if (p.name.rfind("unet.", 0) == 0) CHECK(mb.params()[mb.params().at(p.name)].value == p.value);
    }
}

TEST_CASE("text table: null caption is the last row block, out of range rejected") {
    FaceAdapterModel<double> model(small_config());
    const int n = model.unet().captions;
    CHECK(model.null_text_embedding() == model.text_embedding(n));
    CHECK(model.text_embedding(0).rows() == model.unet().text_tokens);
    CHECK_THROWS_AS(model.text_embedding(n + 1), InvalidInput);
}

TEST_CASE("adapter transparency: zero gates, and alpha = 0 with non-zero gates") {
    FaceAdapterModel<double> model(small_config());
    const auto z = testing::random_matrix(16, 4, 3);
    const auto text = model.text_embedding(1);
    const Matrix<double> id = identity_embedding(model, testing::random_matrix(64, 32, 4));
    const auto plain = predict_noise(model, z, 40, text, static_cast<const Matrix<double>*>(nullptr), AdapterScale(0.5));
    CHECK((predict_noise(model, z, 40, text, &id, AdapterScale(0.5)) - plain).cwiseAbs().maxCoeff() <= 1e-12);

    for (const auto& d : model.blocks())
        for (ParamId p : model.gsa_parameters(d.index))
            if (model.params()[p].name.find("gamma") != std::string::npos) model.params()[p].value(0, 0) = 0.8;
    CHECK(predict_noise(model, z, 40, text, &id, AdapterScale(0.0)) == plain);
    CHECK((predict_noise(model, z, 40, text, &id, AdapterScale(0.5)) - plain).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("predict_noise reports one increment per adapter block") {
    auto mc = small_config();
    mc.unet.gsa_blocks = {0, 2, 5};
    FaceAdapterModel<double> model(mc);
    const Matrix<double> id = Matrix<double>::Zero(4, 16);
    std::vector<std::pair<int, Matrix<double>>> incs;
    predict_noise(model, testing::random_matrix(16, 4, 5), 3, model.text_embedding(0), &id, AdapterScale(1.0), &incs);
    REQUIRE(incs.size() == 3);
    CHECK(incs[0].first == 0);
    CHECK(incs[1].first == 2);
    CHECK(incs[1].second.rows() == 4);  // mid blocks run at half resolution
    CHECK(incs[2].second.rows() == 16);
}

TEST_CASE("timestep features are bounded and distinct") {
    const auto a = timestep_features<double>(0, 16), b = timestep_features<double>(1, 16);
    CHECK(a.cols() == 16);
    CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
    CHECK((a - b).norm() > 1e-3);
}

TEST_CASE("total_loss gradients match central differences on a one-block model") {
    for (std::uint64_t seed : {11u, 12u}) {
        auto c = testing::make_gradient_case(seed);
        for (const auto& [name, err] : testing::model_gradient_errors(*c.model, c.sample, c.weights, c.alpha,
                                                                      testing::all_optimized(*c.model))) {
            INFO(name);
            CHECK(err <= 1e-3);
        }
    }
}

TEST_CASE("frozen parameters receive no gradient") {
    auto c = testing::make_gradient_case(3);
    ag::Tape<double> tape;
    Binder<double> b(tape, c.model->params(), true);
    tape.backward(total_loss(b, *c.model, c.sample, c.weights, c.alpha));
    std::vector<Matrix<double>> grads;
    b.collect(grads);
    for (ParamId id : c.model->params().with_role(Role::frozen)) CHECK(grads[id].size() == 0);
}

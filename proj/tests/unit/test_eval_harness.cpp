#include "doctest.h"

#include <cmath>

#include "fact/eval_harness.hpp"

using namespace fact;

namespace {

Vector<double> vec(std::initializer_list<double> v) {
    Vector<double> out(static_cast<Eigen::Index>(v.size()));
    int i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

TrainConfig tiny(int steps) {
    TrainConfig c;
    for (const char* kv : {"model.d_model=16", "model.text_tokens=2", "projection.blocks=1", "dataset.identities=3",
                           "dataset.per_identity=2", "optimizer.batch_size=2", "base.pretrain_steps=2",
                           "base.identities=2", "base.per_identity=2", "base.batch_size=2", "sampler.steps=2"}) {
        apply_override(c, kv);
    }
    apply_override(c, "train.total_steps=" + std::to_string(steps));
    return c;
}

}  // namespace

TEST_CASE("cosine similarity: parallel, orthogonal, 45 degrees, zero norm") {
    CHECK(cosine_similarity(vec({1, 2, 3}), vec({2, 4, 6})) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_similarity(vec({1, 0}), vec({0, 5})) == 0.0);
    CHECK(cosine_similarity(vec({1, 0}), vec({1, 1})) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    CHECK(cosine_similarity(vec({1, 0}), vec({-3, 0})) == -1.0);
    CHECK_THROWS_AS(cosine_similarity(vec({0, 0}), vec({1, 1})), NumericError);
    CHECK_THROWS_AS(cosine_similarity(vec({1}), vec({1, 1})), InvalidInput);
}

TEST_CASE("locality ratio: hand cases, empty inside, rescaling invariance") {
    IncrementProfile p;
    MaskPyramid m;
    MaskGrid g(2, 2), mask(2, 2);
    g << 1.0, 0.5, 0.25, 0.25;
    mask << 1, 1, 0, 0;
    p.per_block[0] = g;
    m.per_block[0] = mask;
    // inside mean 0.75, outside mean 0.25
    CHECK(locality_ratio(p, m).at(0).value() == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    // Soft mask weights each cell.
    MaskGrid soft(2, 2);
    soft << 1.0, 0.5, 0.0, 0.0;
    m.per_block[0] = soft;
    const double in = (1.0 * 1.0 + 0.5 * 0.5) / 1.5, out = (0.5 * 0.5 + 0.25 + 0.25) / 2.5;
    CHECK(locality_ratio(p, m).at(0).value() == doctest::Approx(out / in).epsilon(1e-14));

    IncrementProfile scaled = p;
    scaled.per_block[0] *= 7.0;
    CHECK(locality_ratio(scaled, m).at(0).value() == doctest::Approx(locality_ratio(p, m).at(0).value()).epsilon(1e-14));

    m.per_block[0] = MaskGrid::Zero(2, 2);
    CHECK_FALSE(locality_ratio(p, m).at(0).has_value());
    m.per_block[0] = MaskGrid::Zero(3, 3);
    CHECK_THROWS_AS(locality_ratio(p, m), InvalidInput);
    m.per_block.clear();
    CHECK_THROWS_AS(locality_ratio(p, m), InvalidInput);
}

TEST_CASE("median locality skips undefined blocks") {
    CHECK_FALSE(median_locality({}).has_value());
    CHECK_FALSE(median_locality({{0, std::nullopt}}).has_value());
    CHECK(median_locality({{0, 3.0}, {1, 1.0}, {2, 2.0}}) == 2.0);
    CHECK(median_locality({{0, 4.0}, {1, 1.0}, {2, std::nullopt}}) == 2.5);
}

TEST_CASE("report JSON round trip keeps every field") {
    EvalReport r;
    r.name = "fair";
    r.config_hash = "00000000000000ab";
    r.identity_sim = 0.75;
    r.identity_wins = 2;
    r.per_identity = {{0, 0, 3, 0.9, 0.4}, {1, 3, 0, 0.6, 0.7}};
    r.locality = {{1, 0.5}, {2, std::nullopt}};
    r.locality_median = 0.5;
    r.loss_curve = {{0, 1.5}, {1, 1.25}};
    r.eval_loss_initial = 1.5;
    r.eval_loss_final = 0.5;
    const auto back = report_from_json(nlohmann::json::parse(report_to_json(r).dump()));
    CHECK(report_to_json(back) == report_to_json(r));
    CHECK(back.per_identity[1].other == 0.7);
    CHECK_FALSE(back.locality.at(2).has_value());
    CHECK_FALSE(back.error.has_value());
    CHECK_THROWS_AS(report_from_json(nlohmann::json{{"per_identity", {{{"identity", 1}}}}}), LoadError);
}

TEST_CASE("render_table has one row per report and marks failures") {
    EvalReport ok, bad;
    ok.name = "fair";
    ok.locality_median = 0.5;
    bad.name = "nofair";
    bad.error = "non-finite loss";
    const auto table = render_table({ok, bad});
    CHECK(std::count(table.begin(), table.end(), '\n') == 3);
    CHECK(table.find("fair") != std::string::npos);
    CHECK(table.find("failed: non-finite loss") != std::string::npos);
}

TEST_CASE("named variants") {
    CHECK(named_variant("fair").overrides == std::vector<std::string>{"loss.lambda_fair=0.01"});
    CHECK(named_variant("nofair").overrides == std::vector<std::string>{"loss.lambda_fair=0"});
    CHECK(named_variant("ds_cl").overrides.empty());
    CHECK(named_variant("wo_ds").overrides.size() == 3);
    CHECK(named_variant("wo_cl").overrides.size() == 2);
    CHECK_THROWS_AS(named_variant("nope"), InvalidConfig);
}

TEST_CASE("base key ignores adapter-only settings") {
    TrainConfig a, b;
    apply_override(b, "loss.lambda_fair=0");
    apply_override(b, "curriculum.shuffle_end=0.9");
    apply_override(b, "optimizer.lr=1e-3");
    CHECK(base_key(a) == base_key(b));
    apply_override(b, "base.pretrain_steps=7");
    CHECK(base_key(a) != base_key(b));
}

TEST_CASE("an adopted base equals a freshly pretrained one") {
    auto c = tiny(0);
    Trainer<float> a(c, dataset_for(c)), b(c, dataset_for(c));
    a.pretrain_base();
    const auto frozen = role_digest(a.model().params(), Role::frozen);
    b.adopt_base(a.frozen_tensors());
    CHECK(role_digest(b.model().params(), Role::frozen) == frozen);
    b.pretrain_base();  // no-op once adopted
    CHECK(role_digest(b.model().params(), Role::frozen) == frozen);
    CHECK_THROWS_AS(b.adopt_base({}), InvalidConfig);
}

TEST_CASE("identical variants give identical reports; evaluation covers every identity") {
    const auto c = tiny(2);
    AblationOptions o;
    const auto reports = run_ablation({{"a", {}}, {"b", {}}, {"nofair", {"loss.lambda_fair=0"}}}, c, 5, o);
    REQUIRE(reports.size() == 3);
    auto ja = report_to_json(reports[0]), jb = report_to_json(reports[1]);
    ja.erase("name");
    jb.erase("name");
    CHECK(ja == jb);
    CHECK(reports[0].config_hash != reports[2].config_hash);
    CHECK(reports[0].per_identity.size() == 3);
    for (const auto& s : reports[0].per_identity) {
        CHECK(s.own >= -1.0);
        CHECK(s.own <= 1.0);
        CHECK(s.reference_record != s.other_record);
    }
    CHECK(reports[0].locality.size() == 6);
}

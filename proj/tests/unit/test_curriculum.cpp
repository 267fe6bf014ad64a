#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "fact/curriculum.hpp"
#include "support.hpp"

using namespace fact;

namespace {

IdentityDataset small_dataset(int identities = 3, int per = 4) {
    Rng rng = make_stream(1, {});
    return generate_synthetic_identity_dataset(identities, per, 16, 2, rng);
}

CurriculumSchedule fixed(double drop, double shuffle) {
    CurriculumSchedule s;
    s.drop_prob = drop;
    s.shuffle_start = s.shuffle_end = shuffle;
    return s;
}

}  // namespace

TEST_CASE("shuffle schedule: endpoints, midpoint, clamping, monotone") {
    CurriculumSchedule s;
    s.total_steps = 2000;
    CHECK(schedule_shuffle_prob(0, s) == 0.2);
    CHECK(schedule_shuffle_prob(2000, s) == 0.6);
    CHECK(schedule_shuffle_prob(1000, s) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(schedule_shuffle_prob(-5, s) == 0.2);
    CHECK(schedule_shuffle_prob(5000, s) == 0.6);
    double prev = 0;
    for (int step = 0; step <= 2000; step += 50) {
        const double p = schedule_shuffle_prob(step, s);
        CHECK(p >= prev);
        CHECK(p >= 0.2);
        CHECK(p <= 0.6);
        prev = p;
    }
}

TEST_CASE("sample_condition: drop = 1 always drops, drop = shuffle = 0 always pairs with self") {
    auto ds = small_dataset();
    Rng rng = make_stream(2, {});
    for (int i = 0; i < 200; ++i) {
        const int r = i % ds.size();
        auto dropped = sample_condition(ds, r, 0, fixed(1.0, 0.5), rng);
        CHECK(dropped.kind == ConditionCase::dropped);
        CHECK_FALSE(dropped.source_record.has_value());
        auto paired = sample_condition(ds, r, 0, fixed(0.0, 0.0), rng);
        CHECK(paired.kind == ConditionCase::paired);
        CHECK(paired.source_record == r);
    }
}

TEST_CASE("sample_condition: shuffles stay within the identity and never pick self") {
    auto ds = small_dataset();
    Rng rng = make_stream(3, {});
    std::map<int, int> picks;
    for (int i = 0; i < 3000; ++i) {
        auto plan = sample_condition(ds, 0, 0, fixed(0.0, 1.0), rng);
        REQUIRE(plan.kind == ConditionCase::shuffled);
        CHECK(*plan.source_record != 0);
        CHECK(ds.record(*plan.source_record).identity_id == ds.record(0).identity_id);
        ++picks[*plan.source_record];
    }
    // Uniform over the three other records.
    CHECK(picks.size() == 3);
    for (const auto& [r, n] : picks) CHECK(std::abs(n - 1000) < 4 * std::sqrt(3000 * (1.0 / 3) * (2.0 / 3)));
}

TEST_CASE("sample_condition: a singleton identity falls back to paired") {
    IdentityDataset ds;
    auto base = small_dataset(2, 2);
    ds.add(base.record(0));
    IdentityRecord lone = base.record(2);
    lone.identity_id = 99;
    const int r = ds.add(lone);
    Rng rng = make_stream(4, {});
    for (int i = 0; i < 100; ++i) {
        auto plan = sample_condition(ds, r, 0, fixed(0.0, 1.0), rng);
        CHECK(plan.kind == ConditionCase::paired);
        CHECK(plan.source_record == r);
    }
}

TEST_CASE("sample_condition frequencies match the multinomial at p_s = 0.4") {
    auto ds = small_dataset();
    Rng rng = make_stream(5, {});
    const int n = 100000;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) ++counts[int(sample_condition(ds, i % ds.size(), 0, fixed(0.1, 0.4), rng).kind)];
    const double expected[3] = {0.9 * 0.6, 0.1, 0.9 * 0.4};  // paired, dropped, shuffled
    for (int k = 0; k < 3; ++k) {
        const double sigma = std::sqrt(n * expected[k] * (1 - expected[k]));
        CHECK(std::abs(counts[k] - n * expected[k]) <= 3 * sigma);
    }
}

TEST_CASE("sample_condition is reproducible under a seed") {
    auto ds = small_dataset();
    Rng a = make_stream(6, {}), b = make_stream(6, {});
    CurriculumSchedule s;
    s.total_steps = 100;
    for (int i = 0; i < 500; ++i) {
        auto pa = sample_condition(ds, i % ds.size(), i % 100, s, a);
        auto pb = sample_condition(ds, i % ds.size(), i % 100, s, b);
        CHECK(pa.kind == pb.kind);
        CHECK(pa.source_record == pb.source_record);
    }
}

TEST_CASE("synthetic dataset: counts, index partition, identity parameters shared") {
    const auto ds = generate_synthetic_identity_dataset(DatasetConfig{});
    CHECK(ds.size() == 100);
    CHECK(ds.identities().size() == 10);
    int total = 0;
    for (const auto& [id, recs] : ds.index()) {
        CHECK(recs.size() == 10);
        total += int(recs.size());
        for (int r : recs) CHECK(ds.record(r).identity_id == id);
    }
    CHECK(total == 100);
    // Same seed, same data; records of one identity differ in nuisance.
    const auto again = generate_synthetic_identity_dataset(DatasetConfig{});
    CHECK(again.record(17).image.pixels == ds.record(17).image.pixels);
    CHECK(ds.record(0).image.pixels != ds.record(1).image.pixels);
    for (const auto& r : ds.records()) CHECK_NOTHROW(validate(r.image));
}

TEST_CASE("dataset save/load round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "fact_dataset_roundtrip";
    std::filesystem::remove_all(dir);
    const auto ds = small_dataset(2, 3);
    save_dataset(ds, dir);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    const auto back = load_dataset(dir);
    REQUIRE(back.size() == ds.size());
    for (int i = 0; i < ds.size(); ++i) {
        CHECK(back.record(i).identity_id == ds.record(i).identity_id);
        CHECK(back.record(i).caption_id == ds.record(i).caption_id);
        CHECK(back.record(i).image.mask == ds.record(i).image.mask);
        for (std::size_t k = 0; k < ds.record(i).image.pixels.size(); ++k)
            CHECK(std::abs(back.record(i).image.pixels[k] - ds.record(i).image.pixels[k]) <= 0.5f / 255.0f + 1e-6f);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("null identity embedding: zero, (4, 64), one shared tensor") {
    FaceAdapterModel<float> model(ModelConfig{});
    const auto e = null_identity_embedding(model);
    CHECK(e.rows() == 4);
    CHECK(e.cols() == 64);
    CHECK(e.isZero(0.0f));
    model.params()[model.null_identity()].value.setConstant(0.25f);
    CHECK(null_identity_embedding(model) == null_identity_embedding(model));
    CHECK(null_identity_embedding(model)(3, 63) == 0.25f);
}

TEST_CASE("latent codec: constant image, luminance channel, mask pooling") {
    LatentCodec codec;
    FaceImage img = make_image(64, 64, 3);
    std::fill(img.pixels.begin(), img.pixels.end(), 1.0f);
    std::fill(img.mask.begin(), img.mask.end(), 0.0f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 16; ++x) img.mask[y * 64 + x] = 1.0f;
    const auto z = codec.encode(img);
    CHECK(z.rows() == 64);
    CHECK(z.cols() == 4);
    CHECK(z.isApproxToConstant(1.0, 1e-12));
    const auto m = codec.latent_mask(img);
    CHECK(m(0, 0) == 1.0);
    CHECK(m(0, 1) == 1.0);
    CHECK(m(0, 2) == 0.0);
    CHECK(m.sum() == 2.0);
    const auto back = codec.decode(z);
    for (float p : back.pixels) CHECK(p == doctest::Approx(1.0f));
}

TEST_CASE("drop mode names round trip") {
    for (auto m : {DropMode::learned_null, DropMode::zeros, DropMode::bypass}) CHECK(parse_drop_mode(drop_mode_name(m)) == m);
    CHECK_THROWS_AS(parse_drop_mode("none"), InvalidConfig);
}

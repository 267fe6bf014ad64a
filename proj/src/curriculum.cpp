#include "fact/curriculum.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "fact/fair_objective.hpp"

namespace fact {

int IdentityDataset::add(IdentityRecord record) {
    const int idx = static_cast<int>(records_.size());
    index_[record.identity_id].push_back(idx);
    records_.push_back(std::move(record));
    return idx;
}

const std::vector<int>& IdentityDataset::records_of(int identity_id) const {
    auto it = index_.find(identity_id);
    if (it == index_.end()) throw InvalidInput("unknown identity " + std::to_string(identity_id));
    return it->second;
}

std::vector<int> IdentityDataset::identities() const {
    std::vector<int> out;
    for (const auto& [id, _] : index_) out.push_back(id);
    return out;
}

namespace {

struct FaceParams {
    std::array<double, 3> skin, eye, mouth;
    double rx, ry;
    double eye_dx, eye_dy, eye_r;
    double mouth_w, mouth_h, mouth_dy;
};

constexpr std::array<std::array<double, 3>, 6> kBackgrounds = {{
    {0.80, 0.30, 0.30},
    {0.30, 0.70, 0.35},
    {0.30, 0.40, 0.85},
    {0.60, 0.60, 0.60},
    {0.85, 0.75, 0.30},
    {0.55, 0.35, 0.70},
}};

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

FaceParams draw_face(Rng& rng) {
    FaceParams f;
    for (auto& c : f.skin) c = uniform(rng, 0.15, 0.95);
    for (auto& c : f.eye) c = uniform(rng, 0.0, 1.0);
    for (auto& c : f.mouth) c = uniform(rng, 0.0, 1.0);
    f.rx = uniform(rng, 13.0, 19.0);
    f.ry = uniform(rng, 15.0, 21.0);
    f.eye_dx = uniform(rng, 4.0, 8.0);
    f.eye_dy = uniform(rng, -7.0, -2.0);
    f.eye_r = uniform(rng, 1.8, 3.5);
    f.mouth_w = uniform(rng, 3.0, 9.0);
    f.mouth_h = uniform(rng, 1.0, 3.0);
    f.mouth_dy = uniform(rng, 5.0, 10.0);
    return f;
}

FaceImage render(const FaceParams& f, int size, int caption, Rng& rng) {
    FaceImage img = make_image(size, size, 3);
    const double scale = size / 64.0;
    const double cx = size / 2.0 + uniform_int(rng, -4, 4) * scale;
    const double cy = size / 2.0 + uniform_int(rng, -4, 4) * scale;
    const double light = uniform(rng, 0.8, 1.2);
    std::array<double, 3> bg = kBackgrounds[caption % kBackgrounds.size()];
    for (auto& c : bg) c = std::clamp(c + uniform(rng, -0.05, 0.05), 0.0, 1.0);

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double ex = (px - cx) / (f.rx * scale), ey = (py - cy) / (f.ry * scale);
            const bool face = ex * ex + ey * ey <= 1.0;
            std::array<double, 3> col = bg;
            if (face) {
                col = f.skin;
                for (int side : {-1, 1}) {
                    const double dx = px - (cx + side * f.eye_dx * scale), dy = py - (cy + f.eye_dy * scale);
                    if (dx * dx + dy * dy <= f.eye_r * f.eye_r * scale * scale) col = f.eye;
                }
                if (std::abs(px - cx) <= f.mouth_w * scale && std::abs(py - (cy + f.mouth_dy * scale)) <= f.mouth_h * scale) {
                    col = f.mouth;
                }
                for (auto& c : col) c = std::clamp(c * light, 0.0, 1.0);
            }
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(col[c]);
            img.mask[std::size_t(y) * size + x] = face ? 1.0f : 0.0f;
        }
    return img;
}

}  // namespace

IdentityDataset generate_synthetic_identity_dataset(int n_identities, int n_per_identity, int image_size, int captions,
                                                    Rng& rng) {
    if (n_identities < 2 || n_per_identity < 2) throw InvalidConfig("dataset needs >= 2 identities and >= 2 records each");
    if (image_size < 16) throw InvalidConfig("dataset.image_size must be >= 16");
    if (captions < 1) throw InvalidConfig("dataset.captions must be >= 1");
    IdentityDataset ds;
    for (int id = 0; id < n_identities; ++id) {
        const FaceParams face = draw_face(rng);
        for (int r = 0; r < n_per_identity; ++r) {
            const int caption = uniform_int(rng, 0, captions - 1);
            ds.add({render(face, image_size, caption, rng), id, caption});
        }
    }
    return ds;
}

IdentityDataset generate_synthetic_identity_dataset(const DatasetConfig& config) {
    Rng rng = make_stream(config.seed, {0xDA7A});
    return generate_synthetic_identity_dataset(config.identities, config.per_identity, config.image_size, config.captions,
                                               rng);
}

void save_dataset(const IdentityDataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["records"] = nlohmann::json::array();
    for (int i = 0; i < dataset.size(); ++i) {
        const auto& r = dataset.record(i);
        const std::string image = "record_" + std::to_string(i) + ".png";
        const std::string mask = "record_" + std::to_string(i) + "_mask.png";
        write_png(dir / image, r.image.height, r.image.width, r.image.channels, r.image.pixels);
        write_png(dir / mask, r.image.height, r.image.width, 1, r.image.mask);
        manifest["records"].push_back(
            {{"image", image}, {"mask", mask}, {"identity_id", r.identity_id}, {"caption_id", r.caption_id}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

IdentityDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw LoadError("no manifest.json in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("bad dataset manifest: " + std::string(e.what()));
    }
    IdentityDataset ds;
    for (const auto& r : manifest.at("records")) {
        IdentityRecord rec;
        rec.image = load_face_image(dir / r.at("image").get<std::string>(), dir / r.at("mask").get<std::string>());
        rec.identity_id = r.at("identity_id").get<int>();
        rec.caption_id = r.at("caption_id").get<int>();
        ds.add(std::move(rec));
    }
    return ds;
}

void CurriculumSchedule::validate() const {
    if (!(0.0 <= shuffle_start && shuffle_start <= shuffle_end && shuffle_end <= 1.0)) {
        throw InvalidConfig("curriculum requires 0 <= shuffle_start <= shuffle_end <= 1");
    }
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw InvalidConfig("curriculum.drop_prob must lie in [0, 1]");
    if (!(text_drop_prob >= 0.0 && text_drop_prob <= 1.0)) {
        throw InvalidConfig("curriculum.text_drop_prob must lie in [0, 1]");
    }
    if (total_steps < 0) throw InvalidConfig("total_steps must be nonnegative");
}

double schedule_shuffle_prob(int step, const CurriculumSchedule& s) {
    if (s.total_steps <= 0) return s.shuffle_end;
    const double frac = std::clamp(double(step) / double(s.total_steps), 0.0, 1.0);
    return std::clamp(s.shuffle_start + (s.shuffle_end - s.shuffle_start) * frac, s.shuffle_start, s.shuffle_end);
}

const char* condition_case_name(ConditionCase c) {
    switch (c) {
    case ConditionCase::paired: return "paired";
    case ConditionCase::dropped: return "dropped";
    case ConditionCase::shuffled: return "shuffled";
    }
    return "?";
}

ConditionPlan sample_condition(const IdentityDataset& dataset, int record, int step, const CurriculumSchedule& schedule,
                               Rng& rng) {
    const auto& target = dataset.record(record);
    if (bernoulli(rng, schedule.drop_prob)) return {ConditionCase::dropped, std::nullopt};
    if (bernoulli(rng, schedule_shuffle_prob(step, schedule))) {
        const auto& group = dataset.records_of(target.identity_id);
        if (group.size() >= 2) {
            int pick = uniform_int(rng, 0, static_cast<int>(group.size()) - 2);
            // Skip over the target itself.
            const int self_pos = static_cast<int>(std::find(group.begin(), group.end(), record) - group.begin());
            if (pick >= self_pos) ++pick;
            return {ConditionCase::shuffled, group[pick]};
        }
    }
    return {ConditionCase::paired, record};
}

DropMode parse_drop_mode(const std::string& s) {
    if (s == "learned_null") return DropMode::learned_null;
    if (s == "zeros") return DropMode::zeros;
    if (s == "bypass") return DropMode::bypass;
    throw InvalidConfig("drop.mode must be learned_null, zeros or bypass, got '" + s + "'");
}

const char* drop_mode_name(DropMode m) {
    switch (m) {
    case DropMode::learned_null: return "learned_null";
    case DropMode::zeros: return "zeros";
    case DropMode::bypass: return "bypass";
    }
    return "?";
}

MaskGrid mask_grid(const FaceImage& image) {
    MaskGrid m(image.height, image.width);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) m(y, x) = image.mask_at(y, x);
    return m;
}

Matrix<double> LatentCodec::encode(const FaceImage& image) const {
    if (image.height != image_size || image.width != image_size || image.channels != 3) {
        throw InvalidInput("latent codec expects an RGB image of size " + std::to_string(image_size));
    }
    if (channels != 4) throw InvalidConfig("latent codec produces 4 channels");
    const int cell = image_size / grid;
    Matrix<double> z = Matrix<double>::Zero(grid * grid, channels);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double sum[3] = {0, 0, 0};
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x)
                    for (int c = 0; c < 3; ++c) sum[c] += image.at(gy * cell + y, gx * cell + x, c);
            const double n = cell * cell;
            const int row = gy * grid + gx;
            for (int c = 0; c < 3; ++c) z(row, c) = 2.0 * sum[c] / n - 1.0;
            z(row, 3) = (z(row, 0) + z(row, 1) + z(row, 2)) / 3.0;
        }
    return z;
}

FaceImage LatentCodec::decode(const Matrix<double>& latent) const {
    if (latent.rows() != grid * grid || latent.cols() != channels) throw InvalidInput("latent codec: bad latent shape");
    FaceImage img = make_image(image_size, image_size, 3);
    std::fill(img.mask.begin(), img.mask.end(), 1.0f);
    const int cell = image_size / grid;
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            const int row = (y / cell) * grid + x / cell;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp((latent(row, c) + 1.0) / 2.0, 0.0, 1.0));
        }
    return img;
}

MaskGrid LatentCodec::latent_mask(const FaceImage& image) const {
    return downsample_mask(mask_grid(image), {grid, grid});
}

}  // namespace fact

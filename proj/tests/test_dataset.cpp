#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "c2fa/dataset.hpp"
#include "helpers.hpp"

using c2fa::PairedDataset;
using c2fa::SynthConfig;
using testutil::TempDir;

namespace {

// Brute-force class-prototype probe: class means of flattened raw image
// features, each image assigned to the nearest mean by squared distance.
// Class labels come from the generator's class-major id layout.
double prototype_accuracy(const PairedDataset& ds, const SynthConfig& cfg) {
    const size_t flat = static_cast<size_t>(ds.image_tokens) * ds.feature_dim;
    std::vector<std::vector<double>> means(cfg.num_classes, std::vector<double>(flat, 0.0));
    std::vector<int> counts(cfg.num_classes, 0);
    auto class_of = [&](uint64_t id) { return static_cast<int>(id / cfg.images_per_class); };
    for (const auto& img : ds.images) {
        const int c = class_of(img.id);
        ++counts[c];
        for (size_t i = 0; i < flat; ++i) means[c][i] += img.tokens.data()[i];
    }
    for (int c = 0; c < cfg.num_classes; ++c)
        for (auto& v : means[c]) v /= counts[c];

    int correct = 0;
    for (const auto& img : ds.images) {
        double best = 0.0;
        int best_c = -1;
        for (int c = 0; c < cfg.num_classes; ++c) {
            double d2 = 0.0;
            for (size_t i = 0; i < flat; ++i) {
                const double diff = img.tokens.data()[i] - means[c][i];
                d2 += diff * diff;
            }
            if (best_c < 0 || d2 < best) {
                best = d2;
                best_c = c;
            }
        }
        if (best_c == class_of(img.id)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.images.size());
}

bool tensors_equal(const c2fa::Tensor& a, const c2fa::Tensor& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a.data() == b.data();
}

bool datasets_equal(const PairedDataset& a, const PairedDataset& b) {
    if (a.images.size() != b.images.size() || a.speeches.size() != b.speeches.size())
        return false;
    for (size_t i = 0; i < a.images.size(); ++i)
        if (a.images[i].id != b.images[i].id ||
            !tensors_equal(a.images[i].tokens, b.images[i].tokens))
            return false;
    for (size_t i = 0; i < a.speeches.size(); ++i) {
        const auto& x = a.speeches[i];
        const auto& y = b.speeches[i];
        if (x.id != y.id || x.image_id != y.image_id || x.layers.size() != y.layers.size())
            return false;
        for (size_t l = 0; l < x.layers.size(); ++l)
            if (!tensors_equal(x.layers[l], y.layers[l])) return false;
    }
    return true;
}

// Little-endian byte pushers independent of the library's writer.
void push_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void push_u64(std::vector<uint8_t>& v, uint64_t x) {
    for (int i = 0; i < 8; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void push_f64(std::vector<uint8_t>& v, double x) { push_u64(v, std::bit_cast<uint64_t>(x)); }

void dump(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    REQUIRE(out.good());
}

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.num_classes = 6;
    cfg.images_per_class = 3;
    cfg.captions_per_image = 2;
    cfg.speech_layers = 3;
    cfg.speech_tokens = 2;
    cfg.image_tokens = 2;
    cfg.feature_dim = 8;
    cfg.noise_sigma = 0.2;
    cfg.weak_pair_rate = 0.25;
    cfg.seed = 42;
    return cfg;
}

}  // namespace

TEST_CASE("config validation", "[dataset]") {
    SynthConfig cfg = small_config();
    REQUIRE_NOTHROW(cfg.validate());
    SECTION("captions must be at least one") {
        cfg.captions_per_image = 0;
        REQUIRE_THROWS_AS(cfg.validate(), c2fa::DomainError);
    }
    SECTION("sigma must be nonnegative") {
        cfg.noise_sigma = -0.1;
        REQUIRE_THROWS_AS(cfg.validate(), c2fa::DomainError);
    }
    SECTION("weak pair rate stays in the unit interval") {
        cfg.weak_pair_rate = 1.5;
        REQUIRE_THROWS_AS(cfg.validate(), c2fa::DomainError);
    }
    SECTION("zero feature dim rejected") {
        cfg.feature_dim = 0;
        REQUIRE_THROWS_AS(cfg.validate(), c2fa::DomainError);
    }
}

TEST_CASE("generation shape and pairing", "[dataset]") {
    const SynthConfig cfg = small_config();
    const PairedDataset ds = c2fa::generate_dataset(cfg);

    REQUIRE(ds.images.size() == 18);
    REQUIRE(ds.speeches.size() == 36);
    REQUIRE(ds.speech_layers == 3);
    for (const auto& img : ds.images) {
        REQUIRE(img.tokens.rows() == 2);
        REQUIRE(img.tokens.cols() == 8);
    }
    for (const auto& sp : ds.speeches) {
        REQUIRE(sp.layers.size() == 3);
        for (const auto& lay : sp.layers) {
            REQUIRE(lay.rows() == 2);
            REQUIRE(lay.cols() == 8);
        }
    }

    SECTION("pairing bijection: every image referenced exactly captions_per_image times") {
        std::map<uint64_t, int> refs;
        for (const auto& sp : ds.speeches) ++refs[sp.image_id];
        REQUIRE(refs.size() == ds.images.size());
        for (const auto& img : ds.images) REQUIRE(refs.at(img.id) == cfg.captions_per_image);
        REQUIRE_NOTHROW(c2fa::validate_pairing(ds));
    }
    SECTION("validate_pairing rejects a dangling speech reference") {
        PairedDataset broken = c2fa::generate_dataset(cfg);
        broken.speeches[0].image_id = 9999;
        REQUIRE_THROWS_AS(c2fa::validate_pairing(broken), c2fa::ContractError);
    }
}

TEST_CASE("generation is a deterministic function of the seed", "[dataset]") {
    const SynthConfig cfg = small_config();
    const PairedDataset a = c2fa::generate_dataset(cfg);
    const PairedDataset b = c2fa::generate_dataset(cfg);
    REQUIRE(datasets_equal(a, b));

    SynthConfig other = cfg;
    other.seed = 43;
    REQUIRE_FALSE(datasets_equal(a, c2fa::generate_dataset(other)));

    SECTION("weak pairing changes speech but not images") {
        SynthConfig strong = cfg;
        strong.weak_pair_rate = 0.0;
        SynthConfig weak = cfg;
        weak.weak_pair_rate = 1.0;
        const PairedDataset s = c2fa::generate_dataset(strong);
        const PairedDataset w = c2fa::generate_dataset(weak);
        for (size_t i = 0; i < s.images.size(); ++i)
            REQUIRE(tensors_equal(s.images[i].tokens, w.images[i].tokens));
        bool any_diff = false;
        for (size_t i = 0; i < s.speeches.size() && !any_diff; ++i)
            any_diff = !tensors_equal(s.speeches[i].layers[0], w.speeches[i].layers[0]);
        REQUIRE(any_diff);
    }
}

TEST_CASE("planted class structure is recoverable from raw features", "[dataset]") {
    SECTION("zero noise, no weak pairs: prototype matching is perfect") {
        SynthConfig cfg = small_config();
        cfg.noise_sigma = 0.0;
        cfg.weak_pair_rate = 0.0;
        REQUIRE(prototype_accuracy(c2fa::generate_dataset(cfg), cfg) == 1.0);
    }
    SECTION("default config clears the learnability floor") {
        const SynthConfig cfg;  // library defaults
        REQUIRE(prototype_accuracy(c2fa::generate_dataset(cfg), cfg) >= 0.95);
    }
}

TEST_CASE("image-level train/test split", "[dataset]") {
    const SynthConfig cfg = small_config();
    const auto splits = c2fa::generate_splits(cfg);

    REQUIRE(splits.test.images.size() == static_cast<size_t>(cfg.num_classes));
    REQUIRE(splits.train.images.size() ==
            static_cast<size_t>(cfg.num_classes) * (cfg.images_per_class - 1));
    REQUIRE(splits.test.speeches.size() ==
            splits.test.images.size() * cfg.captions_per_image);
    REQUIRE(splits.train.speeches.size() ==
            splits.train.images.size() * cfg.captions_per_image);

    SECTION("exactly one test image per class") {
        std::map<int, int> per_class;
        for (const auto& img : splits.test.images)
            ++per_class[static_cast<int>(img.id / cfg.images_per_class)];
        REQUIRE(per_class.size() == static_cast<size_t>(cfg.num_classes));
        for (const auto& [c, n] : per_class) REQUIRE(n == 1);
    }
    SECTION("no caption crosses the split boundary") {
        REQUIRE_NOTHROW(c2fa::validate_pairing(splits.train));
        REQUIRE_NOTHROW(c2fa::validate_pairing(splits.test));
    }
    SECTION("splits partition the full corpus") {
        const PairedDataset all = c2fa::generate_dataset(cfg);
        std::map<uint64_t, int> seen;
        for (const auto& img : splits.train.images) ++seen[img.id];
        for (const auto& img : splits.test.images) ++seen[img.id];
        REQUIRE(seen.size() == all.images.size());
        for (const auto& [id, n] : seen) REQUIRE(n == 1);
    }
    SECTION("a single image per class cannot be split") {
        SynthConfig tiny = cfg;
        tiny.images_per_class = 1;
        REQUIRE_THROWS_AS(c2fa::generate_splits(tiny), c2fa::DegenerateInputError);
    }
}

TEST_CASE("feature banks round-trip bitwise", "[dataset]") {
    const SynthConfig cfg = small_config();
    const auto splits = c2fa::generate_splits(cfg);
    TempDir dir;

    c2fa::write_features(splits.train, dir.str());
    c2fa::write_features(splits.test, dir.str());

    const PairedDataset train = c2fa::read_features(dir.str(), "train");
    const PairedDataset test = c2fa::read_features(dir.str(), "test");
    REQUIRE(datasets_equal(train, splits.train));
    REQUIRE(datasets_equal(test, splits.test));
    REQUIRE(train.split == "train");
    REQUIRE(train.speech_layers == cfg.speech_layers);
    REQUIRE(train.feature_dim == cfg.feature_dim);

    SECTION("identical config produces byte-identical files") {
        TempDir dir2;
        const auto again = c2fa::generate_splits(cfg);
        c2fa::write_features(again.train, dir2.str());
        c2fa::write_features(again.test, dir2.str());
        for (const char* name :
             {"train_images.c2fa", "train_speech.c2fa", "test_images.c2fa", "test_speech.c2fa",
              "manifest.txt"}) {
            REQUIRE(c2fa::read_file(dir.file(name)) == c2fa::read_file(dir2.file(name)));
        }
    }
    SECTION("unknown split name is an I/O error") {
        REQUIRE_THROWS_AS(c2fa::read_features(dir.str(), "validation"), c2fa::IoError);
    }
}

TEST_CASE("feature bank failure modes are distinct named errors", "[dataset]") {
    const SynthConfig cfg = small_config();
    const PairedDataset ds = c2fa::generate_dataset(cfg);
    TempDir dir;
    const std::string path = dir.file("bank.c2fa");
    c2fa::write_image_bank(path, ds.images, ds.image_tokens, ds.feature_dim);
    const std::vector<uint8_t> good = c2fa::read_file(path);

    SECTION("bad magic") {
        auto bytes = good;
        bytes[0] = 'X';
        dump(path, bytes);
        REQUIRE_THROWS_AS(c2fa::read_image_bank(path), c2fa::BadMagicError);
    }
    SECTION("future version") {
        auto bytes = good;
        bytes[4] = 2;
        dump(path, bytes);
        REQUIRE_THROWS_AS(c2fa::read_image_bank(path), c2fa::VersionMismatchError);
    }
    SECTION("truncation mid-payload") {
        auto bytes = good;
        bytes.resize(bytes.size() - 5);
        dump(path, bytes);
        REQUIRE_THROWS_AS(c2fa::read_image_bank(path), c2fa::TruncationError);
    }
    SECTION("trailing garbage") {
        auto bytes = good;
        bytes.push_back(0);
        bytes.push_back(1);
        dump(path, bytes);
        REQUIRE_THROWS_AS(c2fa::read_image_bank(path), c2fa::CorruptionError);
    }
    SECTION("manifest with a bad header line") {
        c2fa::write_features(ds, dir.str());
        std::ofstream out(dir.file("manifest.txt"), std::ios::trunc);
        out << "not-a-manifest\nall x y\n";
        out.close();
        REQUIRE_THROWS_AS(c2fa::read_features(dir.str(), "all"), c2fa::CorruptionError);
    }
}

TEST_CASE("golden hand-assembled banks decode to known contents", "[dataset]") {
    TempDir dir;

    SECTION("two-item image bank") {
        std::vector<uint8_t> bytes = {'C', '2', 'F', 'A'};
        push_u32(bytes, 1);  // version
        push_u32(bytes, 2);  // items
        push_u32(bytes, 1);  // layers
        push_u32(bytes, 1);  // tokens
        push_u32(bytes, 2);  // dim
        push_u32(bytes, 0);  // no image_id fields
        push_u64(bytes, 7);
        push_f64(bytes, 1.5);
        push_f64(bytes, -2.25);
        push_u64(bytes, 9);
        push_f64(bytes, 0.0);
        push_f64(bytes, 42.0);
        const std::string path = dir.file("golden_images.c2fa");
        dump(path, bytes);

        const c2fa::ImageBank bank = c2fa::read_image_bank(path);
        REQUIRE(bank.items.size() == 2);
        REQUIRE(bank.tokens == 1);
        REQUIRE(bank.dim == 2);
        REQUIRE(bank.items[0].id == 7);
        REQUIRE(bank.items[0].tokens.data() == std::vector<double>{1.5, -2.25});
        REQUIRE(bank.items[1].id == 9);
        REQUIRE(bank.items[1].tokens.data() == std::vector<double>{0.0, 42.0});
    }
    SECTION("one-item two-layer speech bank") {
        std::vector<uint8_t> bytes = {'C', '2', 'F', 'A'};
        push_u32(bytes, 1);
        push_u32(bytes, 1);
        push_u32(bytes, 2);  // layers
        push_u32(bytes, 1);  // tokens
        push_u32(bytes, 1);  // dim
        push_u32(bytes, 1);  // image_id present
        push_u64(bytes, 3);
        push_u64(bytes, 7);
        push_f64(bytes, 0.5);
        push_f64(bytes, -1.0);
        const std::string path = dir.file("golden_speech.c2fa");
        dump(path, bytes);

        const c2fa::SpeechBank bank = c2fa::read_speech_bank(path);
        REQUIRE(bank.items.size() == 1);
        REQUIRE(bank.layers == 2);
        REQUIRE(bank.items[0].id == 3);
        REQUIRE(bank.items[0].image_id == 7);
        REQUIRE(bank.items[0].layers[0].data() == std::vector<double>{0.5});
        REQUIRE(bank.items[0].layers[1].data() == std::vector<double>{-1.0});
    }
}

#pragma once

// Synthetic paired speech/image feature banks with planted class structure,
// plus the binary feature-file format and the per-directory manifest.
//
// Generation layout: every class owns a latent prototype vector. Image items
// are per-token-slot fixed linear views of that prototype plus Gaussian
// noise. Speech captions are views through a different set of fixed matrices,
// replicated across layers; layer l is interpolated toward a fixed random
// mixing matrix and carries noise that grows with depth, so a learned layer
// weighting has signal to find (early layers are cleaner). A configurable
// fraction of captions blends the class latent 50/50 with another class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "c2fa/common.hpp"
#include "c2fa/rng.hpp"
#include "c2fa/serialize.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

struct SynthConfig {
    int num_classes = 32;
    int images_per_class = 8;
    int captions_per_image = 5;
    int speech_layers = 4;
    int speech_tokens = 8;
    int image_tokens = 8;
    int feature_dim = 24;
    double noise_sigma = 0.3;
    double weak_pair_rate = 0.1;
    uint64_t seed = 1;

    void validate() const {
        if (num_classes < 1) throw DomainError("SynthConfig: num_classes must be positive");
        if (images_per_class < 1)
            throw DomainError("SynthConfig: images_per_class must be positive");
        if (captions_per_image < 1)
            throw DomainError("SynthConfig: captions_per_image must be positive");
        if (speech_layers < 1) throw DomainError("SynthConfig: speech_layers must be positive");
        if (speech_tokens < 1) throw DomainError("SynthConfig: speech_tokens must be positive");
        if (image_tokens < 1) throw DomainError("SynthConfig: image_tokens must be positive");
        if (feature_dim < 1) throw DomainError("SynthConfig: feature_dim must be positive");
        if (noise_sigma < 0.0) throw DomainError("SynthConfig: noise_sigma must be nonnegative");
        if (weak_pair_rate < 0.0 || weak_pair_rate > 1.0)
            throw DomainError("SynthConfig: weak_pair_rate must lie in [0,1]");
    }
};

struct ImageItem {
    uint64_t id = 0;
    Tensor tokens;  // image_tokens x feature_dim, raw features
};

struct SpeechItem {
    uint64_t id = 0;
    uint64_t image_id = 0;
    std::vector<Tensor> layers;  // speech_layers entries, each speech_tokens x feature_dim
};

struct PairedDataset {
    std::string split;  // "train", "test", or "all"
    int speech_layers = 0;
    int speech_tokens = 0;
    int image_tokens = 0;
    int feature_dim = 0;
    std::vector<ImageItem> images;
    std::vector<SpeechItem> speeches;
};

struct DatasetSplits {
    PairedDataset train;
    PairedDataset test;
};

namespace detail {

// Fixed substream tags; changing these changes every generated dataset.
inline constexpr uint64_t kProtoStream = 1;
inline constexpr uint64_t kViewStream = 2;
inline constexpr uint64_t kImageNoiseStream = 3;
inline constexpr uint64_t kSpeechNoiseStream = 4;
inline constexpr uint64_t kWeakPairStream = 5;

inline std::vector<double> gaussian_vec(Rng& rng, size_t n, double scale) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.next_gaussian();
    return v;
}

// y = M x for a row-major square matrix M (dim x dim).
inline void matvec(const std::vector<double>& m, const double* x, double* y, int dim) {
    for (int i = 0; i < dim; ++i) {
        double acc = 0.0;
        const double* row = m.data() + static_cast<size_t>(i) * dim;
        for (int j = 0; j < dim; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
}

}  // namespace detail

// Deterministic function of cfg; the returned dataset covers the whole
// corpus (split tag "all"). Image ids are class-major: class c, slot j
// -> id c*images_per_class + j. Speech ids are a global running index.
inline PairedDataset generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    const int F = cfg.feature_dim;
    const int L = cfg.speech_layers;
    const size_t fsz = static_cast<size_t>(F);

    Rng proto_rng = Rng::substream(cfg.seed, detail::kProtoStream);
    Rng view_rng = Rng::substream(cfg.seed, detail::kViewStream);
    Rng img_rng = Rng::substream(cfg.seed, detail::kImageNoiseStream);
    Rng sp_rng = Rng::substream(cfg.seed, detail::kSpeechNoiseStream);
    Rng weak_rng = Rng::substream(cfg.seed, detail::kWeakPairStream);

    // Class prototypes, standard normal entries.
    std::vector<std::vector<double>> protos(cfg.num_classes);
    for (auto& z : protos) z = detail::gaussian_vec(proto_rng, fsz, 1.0);

    // Per-token-slot view matrices for each modality and per-layer mixing
    // matrices, all scaled by 1/sqrt(F) to keep feature norms comparable to
    // the latent's.
    const double mscale = 1.0 / std::sqrt(static_cast<double>(F));
    std::vector<std::vector<double>> image_views(cfg.image_tokens);
    for (auto& v : image_views) v = detail::gaussian_vec(view_rng, fsz * fsz, mscale);
    std::vector<std::vector<double>> speech_views(cfg.speech_tokens);
    for (auto& v : speech_views) v = detail::gaussian_vec(view_rng, fsz * fsz, mscale);
    std::vector<std::vector<double>> layer_mixes(L);
    for (auto& v : layer_mixes) v = detail::gaussian_vec(view_rng, fsz * fsz, mscale);

    PairedDataset ds;
    ds.split = "all";
    ds.speech_layers = L;
    ds.speech_tokens = cfg.speech_tokens;
    ds.image_tokens = cfg.image_tokens;
    ds.feature_dim = F;

    std::vector<double> viewed(fsz), mixed(fsz), latent(fsz);
    uint64_t speech_id = 0;
    for (int c = 0; c < cfg.num_classes; ++c) {
        for (int j = 0; j < cfg.images_per_class; ++j) {
            const uint64_t image_id =
                static_cast<uint64_t>(c) * cfg.images_per_class + static_cast<uint64_t>(j);

            std::vector<double> img(static_cast<size_t>(cfg.image_tokens) * fsz);
            for (int t = 0; t < cfg.image_tokens; ++t) {
                detail::matvec(image_views[t], protos[c].data(), viewed.data(), F);
                for (int k = 0; k < F; ++k)
                    img[static_cast<size_t>(t) * fsz + k] =
                        viewed[k] + cfg.noise_sigma * img_rng.next_gaussian();
            }
            ds.images.push_back(
                {image_id, Tensor::from_data(cfg.image_tokens, F, std::move(img))});

            for (int cap = 0; cap < cfg.captions_per_image; ++cap) {
                latent = protos[c];
                if (cfg.num_classes > 1 && weak_rng.next_double() < cfg.weak_pair_rate) {
                    uint64_t other = weak_rng.next_below(cfg.num_classes - 1);
                    if (other >= static_cast<uint64_t>(c)) ++other;
                    for (int k = 0; k < F; ++k)
                        latent[k] = 0.5 * latent[k] + 0.5 * protos[other][k];
                }

                // Clean per-token base, then per-layer interpolation toward a
                // fixed random mix with depth-growing noise.
                std::vector<double> base(static_cast<size_t>(cfg.speech_tokens) * fsz);
                for (int t = 0; t < cfg.speech_tokens; ++t) {
                    detail::matvec(speech_views[t], latent.data(), viewed.data(), F);
                    for (int k = 0; k < F; ++k)
                        base[static_cast<size_t>(t) * fsz + k] =
                            viewed[k] + cfg.noise_sigma * sp_rng.next_gaussian();
                }

                SpeechItem item;
                item.id = speech_id++;
                item.image_id = image_id;
                item.layers.reserve(L);
                for (int l = 0; l < L; ++l) {
                    const double gamma = (L == 1) ? 0.0 : 0.5 * l / (L - 1);
                    const double layer_sigma = cfg.noise_sigma * (1.0 + 0.125 * l);
                    std::vector<double> lay(base.size());
                    for (int t = 0; t < cfg.speech_tokens; ++t) {
                        const double* b = base.data() + static_cast<size_t>(t) * fsz;
                        detail::matvec(layer_mixes[l], b, mixed.data(), F);
                        for (int k = 0; k < F; ++k)
                            lay[static_cast<size_t>(t) * fsz + k] =
                                (1.0 - gamma) * b[k] + gamma * mixed[k] +
                                layer_sigma * sp_rng.next_gaussian();
                    }
                    item.layers.push_back(
                        Tensor::from_data(cfg.speech_tokens, F, std::move(lay)));
                }
                ds.speeches.push_back(std::move(item));
            }
        }
    }
    return ds;
}

// Image-level split: the last image slot of every class (and all of its
// captions) goes to the test side, so test holds exactly one image per class
// and no caption crosses the boundary.
inline DatasetSplits generate_splits(const SynthConfig& cfg) {
    if (cfg.images_per_class < 2)
        throw DegenerateInputError(
            "generate_splits: images_per_class must be at least 2 to hold out a test image");
    PairedDataset all = generate_dataset(cfg);

    DatasetSplits out;
    for (PairedDataset* part : {&out.train, &out.test}) {
        part->speech_layers = all.speech_layers;
        part->speech_tokens = all.speech_tokens;
        part->image_tokens = all.image_tokens;
        part->feature_dim = all.feature_dim;
    }
    out.train.split = "train";
    out.test.split = "test";

    auto is_test = [&](uint64_t image_id) {
        return static_cast<int>(image_id % cfg.images_per_class) == cfg.images_per_class - 1;
    };
    for (auto& img : all.images)
        (is_test(img.id) ? out.test : out.train).images.push_back(std::move(img));
    for (auto& sp : all.speeches)
        (is_test(sp.image_id) ? out.test : out.train).speeches.push_back(std::move(sp));
    return out;
}

// ---------------------------------------------------------------------------
// Binary feature banks
//
// Little-endian: magic "C2FA", u32 version=1, u32 item count, u32 layers,
// u32 tokens, u32 dim, u32 ids-present flag. Per item: u64 id, u64 image_id
// (only when the flag is set, i.e. speech banks), then layers*tokens*dim
// float64 payload, layer-major. Image banks use layers=1, flag=0.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kFeatureMagic[4] = {'C', '2', 'F', 'A'};
inline constexpr uint32_t kFeatureVersion = 1;

struct BankHeader {
    uint32_t count = 0, layers = 0, tokens = 0, dim = 0, ids_present = 0;
};

inline void write_bank_header(ByteWriter& w, const BankHeader& h) {
    w.raw(kFeatureMagic, 4);
    w.u32(kFeatureVersion);
    w.u32(h.count);
    w.u32(h.layers);
    w.u32(h.tokens);
    w.u32(h.dim);
    w.u32(h.ids_present);
}

inline BankHeader read_bank_header(ByteReader& r, const std::string& path) {
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw BadMagicError("feature bank " + path + ": bad magic");
    const uint32_t version = r.u32();
    if (version != kFeatureVersion)
        throw VersionMismatchError("feature bank " + path + ": version " +
                                   std::to_string(version) + ", expected " +
                                   std::to_string(kFeatureVersion));
    BankHeader h;
    h.count = r.u32();
    h.layers = r.u32();
    h.tokens = r.u32();
    h.dim = r.u32();
    h.ids_present = r.u32();
    if (h.layers == 0 || h.tokens == 0 || h.dim == 0)
        throw CorruptionError("feature bank " + path + ": zero-sized geometry field");
    return h;
}

}  // namespace detail

inline void write_image_bank(const std::string& path, const std::vector<ImageItem>& items,
                             int tokens, int dim) {
    ByteWriter w;
    detail::write_bank_header(w, {static_cast<uint32_t>(items.size()), 1,
                                  static_cast<uint32_t>(tokens), static_cast<uint32_t>(dim), 0});
    for (const auto& item : items) {
        if (item.tokens.rows() != tokens || item.tokens.cols() != dim)
            throw DimensionError("write_image_bank: item " + std::to_string(item.id) +
                                 " has shape " + item.tokens.shape_str());
        w.u64(item.id);
        w.f64_span(item.tokens.data());
    }
    write_file(path, w.bytes());
}

inline void write_speech_bank(const std::string& path, const std::vector<SpeechItem>& items,
                              int layers, int tokens, int dim) {
    ByteWriter w;
    detail::write_bank_header(
        w, {static_cast<uint32_t>(items.size()), static_cast<uint32_t>(layers),
            static_cast<uint32_t>(tokens), static_cast<uint32_t>(dim), 1});
    for (const auto& item : items) {
        if (static_cast<int>(item.layers.size()) != layers)
            throw DimensionError("write_speech_bank: item " + std::to_string(item.id) + " has " +
                                 std::to_string(item.layers.size()) + " layers");
        w.u64(item.id);
        w.u64(item.image_id);
        for (const auto& lay : item.layers) {
            if (lay.rows() != tokens || lay.cols() != dim)
                throw DimensionError("write_speech_bank: item " + std::to_string(item.id) +
                                     " layer shape " + lay.shape_str());
            w.f64_span(lay.data());
        }
    }
    write_file(path, w.bytes());
}

struct ImageBank {
    std::vector<ImageItem> items;
    int tokens = 0;
    int dim = 0;
};

struct SpeechBank {
    std::vector<SpeechItem> items;
    int layers = 0;
    int tokens = 0;
    int dim = 0;
};

inline ImageBank read_image_bank(const std::string& path) {
    ByteReader r(read_file(path));
    const auto h = detail::read_bank_header(r, path);
    if (h.layers != 1)
        throw CorruptionError("image bank " + path + ": layers must be 1, got " +
                              std::to_string(h.layers));
    if (h.ids_present != 0)
        throw CorruptionError("image bank " + path + ": unexpected image_id fields");
    ImageBank bank;
    bank.tokens = static_cast<int>(h.tokens);
    bank.dim = static_cast<int>(h.dim);
    bank.items.reserve(h.count);
    const size_t payload = static_cast<size_t>(h.tokens) * h.dim;
    for (uint32_t i = 0; i < h.count; ++i) {
        ImageItem item;
        item.id = r.u64();
        item.tokens = Tensor::from_data(bank.tokens, bank.dim, r.f64_span(payload));
        bank.items.push_back(std::move(item));
    }
    if (r.remaining() != 0)
        throw CorruptionError("image bank " + path + ": trailing bytes after payload");
    return bank;
}

inline SpeechBank read_speech_bank(const std::string& path) {
    ByteReader r(read_file(path));
    const auto h = detail::read_bank_header(r, path);
    if (h.ids_present != 1)
        throw CorruptionError("speech bank " + path + ": missing image_id fields");
    SpeechBank bank;
    bank.layers = static_cast<int>(h.layers);
    bank.tokens = static_cast<int>(h.tokens);
    bank.dim = static_cast<int>(h.dim);
    bank.items.reserve(h.count);
    const size_t payload = static_cast<size_t>(h.tokens) * h.dim;
    for (uint32_t i = 0; i < h.count; ++i) {
        SpeechItem item;
        item.id = r.u64();
        item.image_id = r.u64();
        item.layers.reserve(h.layers);
        for (uint32_t l = 0; l < h.layers; ++l)
            item.layers.push_back(Tensor::from_data(bank.tokens, bank.dim, r.f64_span(payload)));
        bank.items.push_back(std::move(item));
    }
    if (r.remaining() != 0)
        throw CorruptionError("speech bank " + path + ": trailing bytes after payload");
    return bank;
}

// ---------------------------------------------------------------------------
// Directory layout: <split>_images.c2fa + <split>_speech.c2fa per split and
// a manifest.txt whose lines are "<split> <image file> <speech file>".
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kManifestHeader = "c2fa-manifest v1";

inline std::map<std::string, std::pair<std::string, std::string>> read_manifest(
    const std::string& dir) {
    const std::string path = (std::filesystem::path(dir) / kManifestName).string();
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line != kManifestHeader)
        throw CorruptionError("manifest " + path + ": bad header line");
    std::map<std::string, std::pair<std::string, std::string>> entries;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string split, img, sp;
        if (!(fields >> split >> img >> sp))
            throw CorruptionError("manifest " + path + ": malformed line '" + line + "'");
        entries[split] = {img, sp};
    }
    return entries;
}

inline void write_manifest(
    const std::string& dir,
    const std::map<std::string, std::pair<std::string, std::string>>& entries) {
    std::string out = std::string(kManifestHeader) + "\n";
    for (const auto& [split, files] : entries)
        out += split + " " + files.first + " " + files.second + "\n";
    write_text_file((std::filesystem::path(dir) / kManifestName).string(), out);
}

}  // namespace detail

// Enforces the pairing bijection: speech items reference existing images and
// every image is referenced the same number of times.
inline void validate_pairing(const PairedDataset& ds) {
    std::unordered_map<uint64_t, size_t> refs;
    refs.reserve(ds.images.size());
    for (const auto& img : ds.images) {
        if (!refs.emplace(img.id, 0).second)
            throw ContractError("dataset: duplicate image id " + std::to_string(img.id));
    }
    for (const auto& sp : ds.speeches) {
        auto it = refs.find(sp.image_id);
        if (it == refs.end())
            throw ContractError("dataset: speech item " + std::to_string(sp.id) +
                                " references unknown image " + std::to_string(sp.image_id));
        ++it->second;
    }
    if (ds.images.empty()) {
        if (!ds.speeches.empty()) throw ContractError("dataset: speech items without images");
        return;
    }
    const size_t per = ds.speeches.size() / ds.images.size();
    for (const auto& [id, n] : refs)
        if (n != per || per == 0)
            throw ContractError("dataset: image " + std::to_string(id) + " referenced " +
                                std::to_string(n) + " times, expected " + std::to_string(per));
}

// Writes both banks for ds.split into dir and upserts the manifest entry.
inline void write_features(const PairedDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string img_name = ds.split + "_images.c2fa";
    const std::string sp_name = ds.split + "_speech.c2fa";
    write_image_bank((fs::path(dir) / img_name).string(), ds.images, ds.image_tokens,
                     ds.feature_dim);
    write_speech_bank((fs::path(dir) / sp_name).string(), ds.speeches, ds.speech_layers,
                      ds.speech_tokens, ds.feature_dim);

    std::map<std::string, std::pair<std::string, std::string>> entries;
    if (fs::exists(fs::path(dir) / detail::kManifestName))
        entries = detail::read_manifest(dir);
    entries[ds.split] = {img_name, sp_name};
    detail::write_manifest(dir, entries);
}

// Loads one split via the manifest and re-validates the pairing invariant.
inline PairedDataset read_features(const std::string& dir, const std::string& split) {
    namespace fs = std::filesystem;
    const auto entries = detail::read_manifest(dir);
    auto it = entries.find(split);
    if (it == entries.end()) {
        std::string known;
        for (const auto& [name, _] : entries) known += (known.empty() ? "" : ", ") + name;
        throw IoError("dataset dir " + dir + ": no split '" + split + "' (manifest has: " +
                      known + ")");
    }
    ImageBank ib = read_image_bank((fs::path(dir) / it->second.first).string());
    SpeechBank sb = read_speech_bank((fs::path(dir) / it->second.second).string());
    if (ib.dim != sb.dim)
        throw CorruptionError("dataset dir " + dir + ": image dim " + std::to_string(ib.dim) +
                              " != speech dim " + std::to_string(sb.dim));
    PairedDataset ds;
    ds.split = split;
    ds.speech_layers = sb.layers;
    ds.speech_tokens = sb.tokens;
    ds.image_tokens = ib.tokens;
    ds.feature_dim = ib.dim;
    ds.images = std::move(ib.items);
    ds.speeches = std::move(sb.items);
    validate_pairing(ds);
    return ds;
}

}  // namespace c2fa

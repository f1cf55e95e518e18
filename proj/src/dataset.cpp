#include "fedsim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace fedsim {

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

std::uint32_t read_u32_be(const std::vector<unsigned char>& bytes, std::size_t offset,
                          const char* what) {
    if (offset + 4 > bytes.size()) {
        throw IdxError(IdxError::Kind::truncated,
                       std::string("IDX stream truncated while reading ") + what);
    }
    return (static_cast<std::uint32_t>(bytes[offset]) << 24) |
           (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
           (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
           static_cast<std::uint32_t>(bytes[offset + 3]);
}

void write_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>(v & 0xff));
}

}  // namespace

const char* to_string(PoisonKind kind) {
    switch (kind) {
        case PoisonKind::none: return "none";
        case PoisonKind::noise_mix: return "noise_mix";
        case PoisonKind::label_flip: return "label_flip";
    }
    return "?";
}

std::vector<Tensor> load_idx_images(const std::vector<unsigned char>& bytes) {
    const std::uint32_t magic = read_u32_be(bytes, 0, "magic");
    if (magic != kImageMagic) {
        throw IdxError(IdxError::Kind::wrong_magic,
                       "expected image magic 2051, got " + std::to_string(magic));
    }
    const std::uint32_t count = read_u32_be(bytes, 4, "count");
    const std::uint32_t rows = read_u32_be(bytes, 8, "rows");
    const std::uint32_t cols = read_u32_be(bytes, 12, "cols");
    if (rows == 0 || cols == 0) {
        throw IdxError(IdxError::Kind::bad_value, "image dimensions must be positive");
    }
    const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
    if (16 + static_cast<std::size_t>(count) * pixels > bytes.size()) {
        throw IdxError(IdxError::Kind::truncated,
                       "IDX stream truncated: header promises " + std::to_string(count) +
                           " images of " + std::to_string(pixels) + " bytes");
    }

    std::vector<Tensor> images;
    images.reserve(count);
    std::size_t offset = 16;
    for (std::uint32_t n = 0; n < count; ++n) {
        Tensor img({1, static_cast<int>(rows), static_cast<int>(cols)});
        double* d = img.data();
        for (std::size_t i = 0; i < pixels; ++i) {
            d[i] = static_cast<double>(bytes[offset + i]) / 255.0;
        }
        offset += pixels;
        images.push_back(std::move(img));
    }
    return images;
}

std::vector<int> load_idx_labels(const std::vector<unsigned char>& bytes) {
    const std::uint32_t magic = read_u32_be(bytes, 0, "magic");
    if (magic != kLabelMagic) {
        throw IdxError(IdxError::Kind::wrong_magic,
                       "expected label magic 2049, got " + std::to_string(magic));
    }
    const std::uint32_t count = read_u32_be(bytes, 4, "count");
    if (8 + static_cast<std::size_t>(count) > bytes.size()) {
        throw IdxError(IdxError::Kind::truncated,
                       "IDX stream truncated: header promises " + std::to_string(count) + " labels");
    }

    std::vector<int> labels;
    labels.reserve(count);
    for (std::uint32_t n = 0; n < count; ++n) {
        const int label = bytes[8 + n];
        if (label >= kNumClasses) {
            throw IdxError(IdxError::Kind::bad_value,
                           "label " + std::to_string(label) + " out of range at index " +
                               std::to_string(n));
        }
        labels.push_back(label);
    }
    return labels;
}

std::vector<unsigned char> write_idx_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw std::invalid_argument("write_idx_images: no images");
    const int rows = images.front().dim(1);
    const int cols = images.front().dim(2);

    std::vector<unsigned char> out;
    out.reserve(16 + images.size() * static_cast<std::size_t>(rows) * cols);
    write_u32_be(out, kImageMagic);
    write_u32_be(out, static_cast<std::uint32_t>(images.size()));
    write_u32_be(out, static_cast<std::uint32_t>(rows));
    write_u32_be(out, static_cast<std::uint32_t>(cols));
    for (const Tensor& img : images) {
        if (img.dim(1) != rows || img.dim(2) != cols) {
            throw std::invalid_argument("write_idx_images: mixed image sizes");
        }
        const double* d = img.data();
        for (std::size_t i = 0; i < img.size(); ++i) {
            out.push_back(static_cast<unsigned char>(std::lround(d[i] * 255.0)));
        }
    }
    return out;
}

std::vector<unsigned char> write_idx_labels(const std::vector<int>& labels) {
    std::vector<unsigned char> out;
    out.reserve(8 + labels.size());
    write_u32_be(out, kLabelMagic);
    write_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) out.push_back(static_cast<unsigned char>(l));
    return out;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

std::vector<Example> make_examples(std::vector<Tensor> images, const std::vector<int>& labels) {
    if (images.size() != labels.size()) {
        throw std::invalid_argument("image count " + std::to_string(images.size()) +
                                    " does not match label count " + std::to_string(labels.size()));
    }
    std::vector<Example> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        out.push_back({std::move(images[i]), labels[i]});
    }
    return out;
}

std::vector<Example> synthetic_dataset(std::uint64_t seed, int n, int num_classes) {
    if (num_classes < 1) throw std::invalid_argument("synthetic_dataset: num_classes must be >= 1");
    if (n < num_classes) {
        throw std::invalid_argument("synthetic_dataset: n=" + std::to_string(n) +
                                    " is less than num_classes=" + std::to_string(num_classes));
    }

    Rng rng(mix_seed(seed, kSeedData));

    // One blob per class, centers spread on a circle with a seeded phase so
    // the patterns depend on the seed but classes never overlap entirely.
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    std::vector<Tensor> patterns;
    patterns.reserve(num_classes);
    for (int c = 0; c < num_classes; ++c) {
        const double angle = phase + 2.0 * M_PI * c / num_classes;
        const double cy = (kImageH - 1) / 2.0 + 7.5 * std::sin(angle);
        const double cx = (kImageW - 1) / 2.0 + 7.5 * std::cos(angle);
        const double sigma = 2.5;
        Tensor p({1, kImageH, kImageW});
        double* d = p.data();
        for (int y = 0; y < kImageH; ++y) {
            for (int x = 0; x < kImageW; ++x) {
                const double dy = y - cy;
                const double dx = x - cx;
                d[y * kImageW + x] = 0.8 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            }
        }
        patterns.push_back(std::move(p));
    }

    std::vector<Example> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const int label = i % num_classes;
        Tensor img({1, kImageH, kImageW});
        const double* base = patterns[static_cast<std::size_t>(label)].data();
        double* d = img.data();
        for (std::size_t j = 0; j < img.size(); ++j) {
            d[j] = std::clamp(base[j] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
        }
        out.push_back({std::move(img), label});
    }
    return out;
}

std::vector<Shard> partition_iid(const std::vector<Example>& dataset, int n_clients,
                                 int per_client, std::uint64_t seed) {
    if (n_clients < 1 || per_client < 1) {
        throw std::invalid_argument("partition_iid: n_clients and per_client must be positive");
    }
    const std::size_t required = static_cast<std::size_t>(n_clients) * per_client;
    if (required > dataset.size()) {
        throw std::invalid_argument("partition_iid: requires " + std::to_string(required) +
                                    " examples, dataset has " + std::to_string(dataset.size()));
    }

    std::vector<std::size_t> indices(dataset.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(indices);

    std::vector<Shard> shards;
    shards.reserve(n_clients);
    std::size_t pos = 0;
    for (int c = 0; c < n_clients; ++c) {
        Shard shard;
        shard.client_id = c;
        shard.examples.reserve(per_client);
        for (int k = 0; k < per_client; ++k) {
            shard.examples.push_back(dataset[indices[pos++]]);
        }
        shards.push_back(std::move(shard));
    }
    return shards;
}

Tensor apply_noise_mix(const Tensor& image, double r, Rng& rng) {
    if (r < 0.0 || r > 1.0) {
        throw std::invalid_argument("noise ratio must be in [0,1], got " + std::to_string(r));
    }
    Tensor out = Tensor::zeros_like(image);
    const double* in = image.data();
    double* d = out.data();
    for (std::size_t i = 0; i < image.size(); ++i) {
        d[i] = (1.0 - r) * in[i] + r * rng.uniform();
    }
    return out;
}

int apply_label_flip(int label, int num_classes, Rng& rng) {
    if (num_classes < 2) {
        throw std::invalid_argument("apply_label_flip: num_classes must be >= 2");
    }
    const int pick = rng.below_int(num_classes - 1);
    return pick >= label ? pick + 1 : pick;
}

void apply_poison(Shard& shard, const PoisonSpec& spec) {
    if (spec.kind == PoisonKind::none) return;
    Rng rng(spec.seed);
    for (Example& ex : shard.examples) {
        if (spec.kind == PoisonKind::noise_mix) {
            ex.image = apply_noise_mix(ex.image, spec.ratio, rng);
        } else {
            ex.label = apply_label_flip(ex.label, kNumClasses, rng);
        }
    }
}

}  // namespace fedsim

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

constexpr int kNumClasses = 10;
constexpr int kImageH = 28;
constexpr int kImageW = 28;

// One labeled image, pixels in [0,1].
struct Example {
    Tensor image;  // [1,H,W]
    int label = 0;
};

// A client's disjoint slice of the dataset.
struct Shard {
    int client_id = 0;
    std::vector<Example> examples;
};

enum class PoisonKind { none, noise_mix, label_flip };

struct PoisonSpec {
    PoisonKind kind = PoisonKind::none;
    double ratio = 0.0;  // noise_mix only
    std::uint64_t seed = 0;
};

const char* to_string(PoisonKind kind);

// IDX parsing failures, with the cause kept machine-readable.
class IdxError : public std::runtime_error {
public:
    enum class Kind { wrong_magic, truncated, bad_value };

    IdxError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind(kind) {}

    Kind kind;
};

// IDX image file: big-endian u32 magic 2051, count, rows, cols, then
// count*rows*cols unsigned bytes. Pixels are scaled to [0,1] by /255.
std::vector<Tensor> load_idx_images(const std::vector<unsigned char>& bytes);

// IDX label file: big-endian u32 magic 2049, count, then count bytes in 0..9.
std::vector<int> load_idx_labels(const std::vector<unsigned char>& bytes);

// Writers for test fixtures; inverse of the loaders at the byte level.
std::vector<unsigned char> write_idx_images(const std::vector<Tensor>& images);
std::vector<unsigned char> write_idx_labels(const std::vector<int>& labels);

std::vector<unsigned char> read_file(const std::filesystem::path& path);

// Pairs loaded images with labels.
std::vector<Example> make_examples(std::vector<Tensor> images, const std::vector<int>& labels);

// Deterministic desk-scale dataset: one distinct blob pattern per class plus
// small pixel noise, linearly separable by construction. Labels are balanced
// within +/-1 (label of example i is i % num_classes).
std::vector<Example> synthetic_dataset(std::uint64_t seed, int n, int num_classes = kNumClasses);

// Seeded shuffle of indices, then consecutive disjoint slices of per_client.
std::vector<Shard> partition_iid(const std::vector<Example>& dataset, int n_clients,
                                 int per_client, std::uint64_t seed);

// pixel' = (1-r)*pixel + r*u with u ~ U[0,1] i.i.d.
Tensor apply_noise_mix(const Tensor& image, double r, Rng& rng);

// Uniform over the num_classes-1 wrong labels; never returns the input.
int apply_label_flip(int label, int num_classes, Rng& rng);

// Applies spec.kind to every example in the shard, in order, with a generator
// seeded by spec.seed. Done once when the shard is assigned to a client.
void apply_poison(Shard& shard, const PoisonSpec& spec);

}  // namespace fedsim

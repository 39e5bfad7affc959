#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "regfactor/synth.hpp"

namespace regfactor {

inline constexpr std::array<std::string_view, 3> kSplits{"train", "val", "test"};

struct DatasetConfig {
    int size = 64;
    int seq_len = 4;
    int64_t train_pairs = 512;
    int64_t val_pairs = 64;
    int64_t test_pairs = 64;
    uint64_t seed = 1;

    int64_t pairs(std::string_view split) const;
    void validate() const;
    std::string to_text() const;
    static DatasetConfig from_text(std::string_view text);

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct DatasetSplit {
    std::string name;
    int size = 0;
    std::vector<Sequence> sequences;

    size_t pairs() const;
};

// Full sequences of seq_len followed by one shorter remainder, summing to `pairs`.
std::vector<int> sequence_lengths(int64_t pairs, int seq_len);

uint64_t sequence_seed(uint64_t master, std::string_view split, int64_t sequence);

// Worker count from REGFACTOR_THREADS (default: hardware concurrency, at least 1).
int worker_count();

// Runs fn(i) for i in [0,n) on up to `workers` threads; rethrows the first failure.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

DatasetSplit generate_split(const DatasetConfig& config, std::string_view split, int workers = 1);

/// Writes every split under `root`:
///   root/dataset.txt, root/<split>/meta.csv, root/<split>/<seq:04>/<frame>_{m,f}.pgm
/// Refuses a non-empty root unless `force`, which first removes the previous dataset files.
/// Returns dataset_checksum(root).
uint64_t write_dataset(const DatasetConfig& config, const std::filesystem::path& root, int workers = 1,
                       bool force = false);

DatasetConfig read_dataset_config(const std::filesystem::path& root);

/// Regenerates the split from the seeds in meta.csv (un-quantized images) and verifies
/// the recorded parameters and PGM bytes against it. Throws FormatError on any mismatch
/// or a missing/empty split.
DatasetSplit load_split(const std::filesystem::path& root, std::string_view split, int workers = 1);

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
uint64_t fnv1a(std::string_view bytes, uint64_t hash = kFnvOffset);

/// FNV-1a 64 over every regular file under root in sorted relative-path order,
/// hashing each path followed by its bytes.
uint64_t dataset_checksum(const std::filesystem::path& root);

std::string hex64(uint64_t v);

inline constexpr std::string_view kMetaHeader = "seq_id,frame_idx,theta,tx,ty,sx,sy,shear,gamma,gain,bias,seed";

}  // namespace regfactor

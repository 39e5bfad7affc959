#include "regfactor/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "regfactor/config.hpp"
#include "regfactor/errors.hpp"
#include "regfactor/netpbm.hpp"

namespace fs = std::filesystem;

namespace regfactor {

namespace {

int split_index(std::string_view split) {
    for (size_t i = 0; i < kSplits.size(); ++i)
        if (kSplits[i] == split) return static_cast<int>(i);
    throw ContractError("unknown split '" + std::string(split) + "'");
}

std::string seq_dir(int64_t seq) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(seq));
    return buf;
}

std::string meta_row(const RegistrationSample& s) {
    const AffineParams& a = s.affine;
    const AppearanceParams& q = s.appearance;
    std::string row = std::to_string(s.sequence_id) + "," + std::to_string(s.t);
    for (double v : {a.theta, a.tx, a.ty, a.sx, a.sy, a.shear, q.gamma, q.gain, q.bias}) row += "," + format_double(v);
    return row + "," + std::to_string(s.seed) + "\n";
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace

int64_t DatasetConfig::pairs(std::string_view split) const {
    switch (split_index(split)) {
        case 0: return train_pairs;
        case 1: return val_pairs;
        default: return test_pairs;
    }
}

void DatasetConfig::validate() const {
    if (size < 16 || size % 8 != 0) throw ContractError("dataset size must be a multiple of 8, at least 16");
    if (seq_len < 1) throw ContractError("seq_len must be >= 1");
    if (train_pairs < 1 || val_pairs < 0 || test_pairs < 0) throw ContractError("pair counts must be positive");
}

std::string DatasetConfig::to_text() const {
    std::ostringstream os;
    os << "size=" << size << "\nseq_len=" << seq_len << "\ntrain_pairs=" << train_pairs << "\nval_pairs=" << val_pairs
       << "\ntest_pairs=" << test_pairs << "\nseed=" << seed << '\n';
    return os.str();
}

DatasetConfig DatasetConfig::from_text(std::string_view text) {
    DatasetConfig c;
    for (const auto& e : parse_key_values(text)) {
        if (e.key == "size") c.size = parse_int(e.key, e.value);
        else if (e.key == "seq_len") c.seq_len = parse_int(e.key, e.value);
        else if (e.key == "train_pairs") c.train_pairs = parse_int(e.key, e.value);
        else if (e.key == "val_pairs") c.val_pairs = parse_int(e.key, e.value);
        else if (e.key == "test_pairs") c.test_pairs = parse_int(e.key, e.value);
        else if (e.key == "seed") c.seed = parse_u64(e.key, e.value);
        else throw FormatError("line " + std::to_string(e.line) + ": unknown dataset key '" + e.key + "'");
    }
    c.validate();
    return c;
}

size_t DatasetSplit::pairs() const {
    size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
}

std::vector<int> sequence_lengths(int64_t pairs, int seq_len) {
    std::vector<int> lengths(static_cast<size_t>(pairs / seq_len), seq_len);
    if (pairs % seq_len != 0) lengths.push_back(static_cast<int>(pairs % seq_len));
    return lengths;
}

uint64_t sequence_seed(uint64_t master, std::string_view split, int64_t sequence) {
    return derive_seed(master, {static_cast<uint64_t>(split_index(split)), static_cast<uint64_t>(sequence)});
}

int worker_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("REGFACTOR_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) n = n > 0 ? std::min(n, cap) : cap;
    }
    return std::max(n, 1);
}

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
    const size_t threads = std::min(n, static_cast<size_t>(std::max(workers, 1)));
    if (threads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

DatasetSplit generate_split(const DatasetConfig& config, std::string_view split, int workers) {
    config.validate();
    DatasetSplit out;
    out.name = std::string(split);
    out.size = config.size;
    const auto lengths = sequence_lengths(config.pairs(split), config.seq_len);
    out.sequences.resize(lengths.size());
    parallel_for(lengths.size(), workers, [&](size_t i) {
        const auto id = static_cast<int64_t>(i);
        out.sequences[i] = make_sequence(sequence_seed(config.seed, split, id), lengths[i], config.size, config.size, id);
    });
    return out;
}

uint64_t write_dataset(const DatasetConfig& config, const fs::path& root, int workers, bool force) {
    config.validate();
    if (fs::exists(root) && !fs::is_directory(root)) throw FormatError("'" + root.string() + "' is not a directory");
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force) throw FormatError("output directory '" + root.string() + "' is not empty (use --force)");
        fs::remove(root / "dataset.txt");
        for (auto split : kSplits) fs::remove_all(root / split);
    }
    fs::create_directories(root);
    write_file((root / "dataset.txt").string(), config.to_text());
    for (auto split : kSplits) {
        const DatasetSplit data = generate_split(config, split, workers);
        const fs::path dir = root / split;
        fs::create_directories(dir);
        std::string meta = std::string(kMetaHeader) + "\n";
        for (const auto& seq : data.sequences)
            for (const auto& s : seq) meta += meta_row(s);
        write_file((dir / "meta.csv").string(), meta);
        parallel_for(data.sequences.size(), workers, [&](size_t i) {
            const fs::path sdir = dir / seq_dir(static_cast<int64_t>(i));
            fs::create_directories(sdir);
            for (const auto& s : data.sequences[i]) {
                write_pgm(s.moving, (sdir / (std::to_string(s.t) + "_m.pgm")).string());
                write_pgm(s.fixed, (sdir / (std::to_string(s.t) + "_f.pgm")).string());
            }
        });
    }
    return dataset_checksum(root);
}

DatasetConfig read_dataset_config(const fs::path& root) {
    const fs::path p = root / "dataset.txt";
    if (!fs::exists(p)) throw FormatError("no dataset at '" + root.string() + "' (missing dataset.txt)");
    try {
        return DatasetConfig::from_text(read_file(p.string()));
    } catch (const ContractError& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

DatasetSplit load_split(const fs::path& root, std::string_view split, int workers) {
    const DatasetConfig config = read_dataset_config(root);
    split_index(split);
    const fs::path dir = root / split;
    const fs::path meta_path = dir / "meta.csv";
    if (!fs::exists(meta_path)) throw FormatError("missing split '" + std::string(split) + "' under " + root.string());

    struct Row {
        std::vector<std::string> cells;
        int line;
    };
    std::map<int64_t, std::vector<Row>> by_seq;
    std::istringstream in(read_file(meta_path.string()));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1) {
            if (line != kMetaHeader) throw FormatError(meta_path.string() + ": unexpected header");
            continue;
        }
        if (line.empty()) continue;
        auto cells = split_csv(line);
        if (cells.size() != 12) throw FormatError(meta_path.string() + ": line " + std::to_string(line_no) + ": expected 12 columns");
        const int64_t seq = parse_int("seq_id", cells[0]);
        by_seq[seq].push_back({std::move(cells), line_no});
    }
    if (by_seq.empty()) throw FormatError("split '" + std::string(split) + "' is empty");

    DatasetSplit out;
    out.name = std::string(split);
    out.size = config.size;
    std::vector<std::pair<int64_t, std::vector<Row>>> seqs(by_seq.begin(), by_seq.end());
    out.sequences.resize(seqs.size());
    parallel_for(seqs.size(), workers, [&](size_t i) {
        const auto& [id, rows] = seqs[i];
        auto fail = [&](const std::string& why) {
            throw FormatError(meta_path.string() + ": sequence " + std::to_string(id) + ": " + why);
        };
        const uint64_t seed = parse_u64("seed", rows.front().cells[11]);
        Sequence seq = make_sequence(seed, static_cast<int>(rows.size()), config.size, config.size, id);
        const fs::path sdir = dir / seq_dir(id);
        for (size_t f = 0; f < rows.size(); ++f) {
            const auto& c = rows[f].cells;
            if (parse_int("frame_idx", c[1]) != static_cast<int>(f)) fail("frames out of order");
            std::string recorded;
            for (size_t k = 0; k < c.size(); ++k) recorded += (k ? "," : "") + c[k];
            if (meta_row(seq[f]) != recorded + "\n") {
                fail("line " + std::to_string(rows[f].line) + " does not match regenerated parameters");
            }
            const std::string stem = (sdir / std::to_string(f)).string();
            if (read_file(stem + "_m.pgm") != encode_pgm(seq[f].moving) ||
                read_file(stem + "_f.pgm") != encode_pgm(seq[f].fixed)) {
                fail("frame " + std::to_string(f) + " images differ from regenerated samples");
            }
        }
        out.sequences[i] = std::move(seq);
    });
    return out;
}

uint64_t fnv1a(std::string_view bytes, uint64_t hash) {
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

uint64_t dataset_checksum(const fs::path& root) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), root).generic_string());
    std::sort(files.begin(), files.end());
    uint64_t h = kFnvOffset;
    for (const auto& f : files) {
        h = fnv1a(f, h);
        h = fnv1a(read_file((root / f).string()), h);
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace regfactor

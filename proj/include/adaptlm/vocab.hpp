#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace adaptlm {

// Frequency-ordered vocabulary. The unknown and end-of-sentence symbols are
// ordinary entries carrying their effective training counts (eos = number of
// sentences, unk = tokens replaced), so the non-increasing-frequency
// invariant holds for every index. Ties break by first occurrence in the
// corpus, with the special symbols ordered before any corpus word.
struct Vocabulary {
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kEos = "</s>";

  std::vector<std::string> words;   // id -> string, frequency-descending
  std::vector<long long> freq;      // id -> training count
  int unk_id = -1;
  int eos_id = -1;

  int size() const { return static_cast<int>(words.size()); }

  int id_of(std::string_view w) const {
    auto it = index_.find(std::string(w));
    return it == index_.end() ? unk_id : it->second;
  }

  bool contains(std::string_view w) const { return index_.count(std::string(w)) != 0; }

  void rebuild_index();

 private:
  std::unordered_map<std::string, int> index_;
};

// Keeps words occurring strictly more than min_count times; everything else
// maps to the unknown symbol. One sentence per line, whitespace tokenized,
// eos appended per sentence. Rejects corpora without any tokens.
Vocabulary build_vocabulary(std::istream& corpus, long long min_count);
Vocabulary build_vocabulary_from_file(const std::string& path, long long min_count);

// word<TAB>count per line, frequency-descending
void save_vocabulary(const Vocabulary& v, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

// FNV-1a over the serialized lines; pairs binarized streams with their vocab.
std::uint64_t vocab_checksum(const Vocabulary& v);

// Maps one pre-tokenized line to ids (unknowns folded) with eos appended.
std::vector<int> encode_line(const Vocabulary& v, std::string_view line);

// ---------------------------------------------------------------------------
// ClusterPartition: frequency-ordered bands with geometrically shrinking
// dimensions d, d/k, d/k^2, ... Band 0 is the head.
// ---------------------------------------------------------------------------

struct ClusterPartition {
  std::vector<int> band_sizes;
  int head_dim = 0;         // d
  int capacity_factor = 1;  // k
  std::vector<int> band_dims;
  std::vector<int> offsets;  // size n+1 prefix sums

  int num_bands() const { return static_cast<int>(band_sizes.size()); }
  int vocab_size() const { return offsets.back(); }

  int band_of(int id) const;
  int local_index(int id, int band) const { return id - offsets[static_cast<std::size_t>(band)]; }
};

// Validates positive sizes and that every d/k^(i-1) is a positive integer.
ClusterPartition make_partition(std::vector<int> band_sizes, int d, int k);

// Additionally checks that the bands cover the vocabulary exactly.
ClusterPartition partition_vocab(const Vocabulary& v, std::vector<int> band_sizes, int d, int k);

}  // namespace adaptlm

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caprese/tokenizer.hpp"

namespace caprese {

inline constexpr uint32_t kCorpusVersion = 1;

// Byte-tokenized documents; each carries BOS and EOS.
struct Corpus {
    std::vector<TokenSequence> documents;
    size_t token_count() const;
};

// Tokenizes every regular file under dir, in sorted path order so re-running
// produces an identical container. DomainError when no documents are found.
Corpus ingest_directory(const std::string& dir);  // IoError on unreadable path

// One document from raw text: BOS, bytes, EOS.
TokenSequence tokenize_document(const std::string& text);

// On-disk layout: magic "CPRC", u32 LE version, u64 LE document count,
// u64 LE offsets (count+1 of them, in tokens, starting at 0), then token
// data as u16 LE.
void save_corpus(const Corpus& corpus, const std::string& path);  // IoError / FormatError
Corpus load_corpus(const std::string& path);                      // IoError / FormatError

struct CorpusSplit {
    std::vector<TokenSequence> train;
    std::vector<TokenSequence> val;
};

// Deterministic hash split: a document lands in validation when
// fnv1a64(seed, token bytes) % 100 falls below round(val_fraction * 100).
// Membership depends only on content and seed, never on document order.
CorpusSplit split_corpus(const Corpus& corpus, double val_fraction, uint64_t seed);

}  // namespace caprese

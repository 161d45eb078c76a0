#include "caprese/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "caprese/errors.hpp"

namespace caprese {

namespace {

namespace fs = std::filesystem;

void write_u32le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64le(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32le(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(std::string("corpus: truncated ") + what);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint64_t read_u64le(std::istream& in, const char* what) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
        throw FormatError(std::string("corpus: truncated ") + what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

uint64_t fnv1a64(uint64_t seed, const TokenSequence& tokens) {
    uint64_t h = 14695981039346656037ull ^ seed;
    for (Token t : tokens) {
        const uint32_t v = uint32_t(t);
        for (int i = 0; i < 4; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace

size_t Corpus::token_count() const {
    size_t n = 0;
    for (const TokenSequence& doc : documents) n += doc.size();
    return n;
}

TokenSequence tokenize_document(const std::string& text) {
    TokenSequence tokens = encode_bytes(text);
    tokens.push_back(kEosToken);
    return tokens;
}

Corpus ingest_directory(const std::string& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec))
        throw IoError("corpus: '" + dir + "' is not a readable directory");

    std::vector<fs::path> files;
    for (const fs::directory_entry& entry : fs::recursive_directory_iterator(dir, ec)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    if (ec) throw IoError("corpus: cannot walk '" + dir + "': " + ec.message());
    std::sort(files.begin(), files.end());

    Corpus corpus;
    for (const fs::path& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw IoError("corpus: cannot read '" + file.string() + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        corpus.documents.push_back(tokenize_document(text));
    }
    if (corpus.documents.empty()) throw DomainError("corpus: no documents under '" + dir + "'");
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("corpus: cannot open '" + path + "' for writing");
    out.write("CPRC", 4);
    write_u32le(out, kCorpusVersion);
    write_u64le(out, corpus.documents.size());
    uint64_t offset = 0;
    write_u64le(out, offset);
    for (const TokenSequence& doc : corpus.documents) {
        offset += doc.size();
        write_u64le(out, offset);
    }
    for (const TokenSequence& doc : corpus.documents) {
        for (Token t : doc) {
            if (t < 0 || t > 0xffff)
                throw FormatError("corpus: token " + std::to_string(t) +
                                  " does not fit the 16-bit container");
            const unsigned char b[2] = {static_cast<unsigned char>(t),
                                        static_cast<unsigned char>(t >> 8)};
            out.write(reinterpret_cast<const char*>(b), 2);
        }
    }
    if (!out) throw IoError("corpus: write failed for '" + path + "'");
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot open '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "CPRC", 4) != 0)
        throw FormatError("corpus: bad magic in '" + path + "'");
    const uint32_t version = read_u32le(in, "version");
    if (version != kCorpusVersion)
        throw FormatError("corpus: unsupported version " + std::to_string(version));
    const uint64_t count = read_u64le(in, "document count");
    std::vector<uint64_t> offsets(count + 1);
    for (uint64_t i = 0; i <= count; ++i) offsets[i] = read_u64le(in, "offset table");
    if (offsets[0] != 0) throw FormatError("corpus: offsets must start at zero");
    for (uint64_t i = 0; i < count; ++i)
        if (offsets[i + 1] < offsets[i]) throw FormatError("corpus: offsets must be ascending");

    Corpus corpus;
    corpus.documents.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        TokenSequence& doc = corpus.documents[i];
        doc.resize(offsets[i + 1] - offsets[i]);
        for (Token& t : doc) {
            unsigned char b[2];
            if (!in.read(reinterpret_cast<char*>(b), 2))
                throw FormatError("corpus: truncated token data");
            t = Token(uint32_t(b[0]) | uint32_t(b[1]) << 8);
        }
    }
    if (in.peek() != std::istream::traits_type::eof())
        throw FormatError("corpus: trailing bytes after token data");
    return corpus;
}

CorpusSplit split_corpus(const Corpus& corpus, double val_fraction, uint64_t seed) {
    if (!(val_fraction >= 0.0) || !(val_fraction <= 1.0))
        throw DomainError("split_corpus: val_fraction must lie in [0, 1]");
    if (corpus.documents.empty()) throw DomainError("split_corpus: empty corpus");
    const uint64_t threshold = uint64_t(std::llround(val_fraction * 100.0));
    CorpusSplit split;
    for (const TokenSequence& doc : corpus.documents) {
        if (fnv1a64(seed, doc) % 100 < threshold)
            split.val.push_back(doc);
        else
            split.train.push_back(doc);
    }
    return split;
}

}  // namespace caprese

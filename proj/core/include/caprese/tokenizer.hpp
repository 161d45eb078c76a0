#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace caprese {

using Token = int32_t;
using TokenSequence = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS and EOS.
inline constexpr Token kBosToken = 256;
inline constexpr Token kEosToken = 257;
inline constexpr int kByteVocabSize = 258;

inline TokenSequence encode_bytes(std::string_view text, bool add_bos = true) {
    TokenSequence out;
    out.reserve(text.size() + 1);
    if (add_bos) out.push_back(kBosToken);
    for (unsigned char ch : text) out.push_back(Token(ch));
    return out;
}

inline std::string decode_bytes(const TokenSequence& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens)
        if (t >= 0 && t < 256) out.push_back(char(static_cast<unsigned char>(t)));
    return out;
}

}  // namespace caprese

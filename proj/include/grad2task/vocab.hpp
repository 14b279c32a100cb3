#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace g2t {

/// Whitespace-token vocabulary. File format: one token per line, line index
/// is the token id. Ids 0..3 are reserved for [PAD], [CLS], [UNK], [MASK].
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kUnk = 2;
    static constexpr int kMask = 3;

    Vocab(); // reserved tokens only

    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int add(const std::string& token); // idempotent
    int id(const std::string& token) const; // kUnk when unknown
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }

    /// [CLS]-prefixed id sequence from whitespace-split text.
    std::vector<int> encode_text(const std::string& text) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

} // namespace g2t

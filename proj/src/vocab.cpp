#include "grad2task/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace g2t {

Vocab::Vocab() {
    for (const char* t : {"[PAD]", "[CLS]", "[UNK]", "[MASK]"}) add(t);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("Vocab: cannot open " + path);
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.add(line);
    }
    if (v.size() < 4) throw std::runtime_error("Vocab: file too short (reserved ids missing): " + path);
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("Vocab: cannot write " + path);
    for (const auto& t : tokens_) os << t << "\n";
}

int Vocab::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("Vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode_text(const std::string& text) const {
    std::vector<int> ids{kCls};
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) ids.push_back(id(tok));
    return ids;
}

} // namespace g2t

#include "cytodiff/common/text_embedding.hpp"

#include <cctype>
#include <cmath>
#include <random>

#include "cytodiff/common/hash.hpp"

namespace cytodiff {

namespace {

std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c == '-') {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace

std::vector<float> embed_phrase(std::string_view phrase, int dim) {
    std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
    for (const auto& w : words(phrase)) {
        std::mt19937_64 rng(fnv1a64(w));
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto& a : acc) a += n(rng);
    }
    double norm = 0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    std::vector<float> out(acc.size(), 0.0f);
    if (norm > 0) {
        for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / norm);
    }
    return out;
}

std::vector<std::string> split_phrases(std::string_view prompt) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= prompt.size()) {
        const auto pos = prompt.find(", ", start);
        const auto end = pos == std::string_view::npos ? prompt.size() : pos;
        if (end > start) out.emplace_back(prompt.substr(start, end - start));
        if (pos == std::string_view::npos) break;
        start = pos + 2;
    }
    return out;
}

}  // namespace cytodiff

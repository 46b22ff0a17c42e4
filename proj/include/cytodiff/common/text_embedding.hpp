#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cytodiff {

/// Frozen hashed bag-of-words phrase encoder. Each lowercase word maps to a
/// fixed pseudo-random unit direction derived from its hash; a phrase is the
/// normalized sum of its words. Stands in for a pretrained text encoder at
/// desk scale.
std::vector<float> embed_phrase(std::string_view phrase, int dim);

/// Splits a rendered prompt on ", " into its phrases.
std::vector<std::string> split_phrases(std::string_view prompt);

}  // namespace cytodiff

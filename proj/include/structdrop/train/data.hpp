#pragma once

#include "structdrop/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace structdrop {

/// Grayscale images, one per row, scaled to [0, 1].
struct ImageDataset
{
  Matrix<float> images; ///< count x (rows*cols)
  std::vector<std::uint8_t> labels;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return images.rows(); }
  ImageDataset head(Index n) const;
};

/// IDX (MNIST layout) readers. Magic 0x00000803 for u8 images, 0x00000801 for u8 labels.
ImageDataset load_idx(std::string const &images_path, std::string const &labels_path);
void save_idx(ImageDataset const &data, std::string const &images_path, std::string const &labels_path);

/// Deterministic 28x28 stroke-rendered digits with random affine jitter,
/// stroke width and pixel noise. Classes are balanced in expectation.
ImageDataset synthetic_digits(Index count, std::uint64_t seed);

/// Character-level token stream.
struct TextCorpus
{
  std::string alphabet; ///< token id -> character
  std::vector<int> tokens;

  Index vocab() const { return static_cast<Index>(alphabet.size()); }
  Index size() const { return static_cast<Index>(tokens.size()); }
  /// Re-encode `text` with this corpus' alphabet; unknown bytes are rejected.
  TextCorpus encode(std::string const &text) const;
  /// First `fraction` of tokens, and the rest, sharing the alphabet.
  std::pair<TextCorpus, TextCorpus> split(double fraction) const;
};

TextCorpus text_corpus(std::string const &text);
TextCorpus load_text(std::string const &path);
/// Sentences from a small random word-transition grammar.
std::string synthetic_text(Index chars, std::uint64_t seed);

} // namespace structdrop

#pragma once

#include "fda/tensor.hpp"
#include "fda/textproc.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace fda {

// Closed "shape-world" grammar: every caption word has exactly one POS tag.
class Grammar {
public:
    static const Grammar& standard();

    const std::vector<std::string>& shapes() const { return shapes_; }
    const std::vector<std::string>& colors() const { return colors_; }
    const std::vector<std::string>& verbs() const { return verbs_; }

    // Tag from the grammar's table; words outside the grammar are OTHER.
    PosTag tag_of(std::string_view word) const;
    TokenSequence tag(TokenSequence seq) const;
    // Every surface form the grammar can emit, sorted.
    std::vector<std::string> vocabulary() const;

private:
    Grammar();
    std::vector<std::string> shapes_, colors_, verbs_;
    std::vector<std::pair<std::string, PosTag>> table_;
};

enum class Split { Train, Test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct CorpusItem {
    std::uint64_t id = 0;
    Tensor image;  // [32 x 32 x 3], values in [0,1]
    std::string caption;
    std::vector<PosTag> pos_tags;  // parallel to tokenize(caption), [CLS] included
    Split split = Split::Train;

    TokenSequence tokens(std::size_t max_len) const;
};

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;

// Deterministic in (seed, id); the first round(n * train_ratio) items are train.
std::vector<CorpusItem> generate(std::uint64_t seed, std::size_t n, double train_ratio = 0.75);
CorpusItem generate_item(std::uint64_t seed, std::uint64_t id, Split split);

std::vector<CorpusItem> select_split(const std::vector<CorpusItem>& items, Split split);

enum class ImageStorage { Inline, External };

// Line-delimited JSON: a header line, then one record per item. Inline images
// are base64 FTEN payloads; external images are FTEN files next to the corpus.
void save_corpus(const std::vector<CorpusItem>& items, const std::string& path,
                 ImageStorage storage = ImageStorage::Inline);
std::vector<CorpusItem> load_corpus(const std::string& path);

bool items_equal(const CorpusItem& a, const CorpusItem& b);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

} // namespace fda

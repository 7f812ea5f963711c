#include "fda/textproc.hpp"

#include "fda/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

namespace fda {

std::string_view to_string(PosTag tag) {
    switch (tag) {
    case PosTag::Noun: return "NOUN";
    case PosTag::Adj: return "ADJ";
    case PosTag::Verb: return "VERB";
    case PosTag::Func: return "FUNC";
    case PosTag::Punct: return "PUNCT";
    case PosTag::Other: return "OTHER";
    }
    return "OTHER";
}

PosTag parse_pos_tag(std::string_view name) {
    for (PosTag t : {PosTag::Noun, PosTag::Adj, PosTag::Verb, PosTag::Func, PosTag::Punct, PosTag::Other}) {
        if (to_string(t) == name) return t;
    }
    fail(ErrorKind::UnknownClass, "unknown POS tag '" + std::string(name) + "'");
}

std::string_view to_string(WordClass cls) {
    switch (cls) {
    case WordClass::Noun: return "NOUN";
    case WordClass::Adj: return "ADJ";
    case WordClass::Verb: return "VERB";
    case WordClass::Func: return "FUNC";
    case WordClass::Content: return "CONTENT";
    }
    return "CONTENT";
}

WordClass parse_word_class(std::string_view name) {
    for (WordClass c : {WordClass::Noun, WordClass::Adj, WordClass::Verb, WordClass::Func, WordClass::Content}) {
        if (to_string(c) == name) return c;
    }
    fail(ErrorKind::UnknownClass, "unknown word class '" + std::string(name) + "'");
}

bool in_class(PosTag tag, WordClass cls) {
    switch (cls) {
    case WordClass::Noun: return tag == PosTag::Noun;
    case WordClass::Adj: return tag == PosTag::Adj;
    case WordClass::Verb: return tag == PosTag::Verb;
    case WordClass::Func: return tag == PosTag::Func;
    case WordClass::Content: return tag == PosTag::Noun || tag == PosTag::Adj || tag == PosTag::Verb;
    }
    return false;
}

std::string TokenSequence::joined() const {
    std::string out;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (i > 1) out += ' ';
        out += tokens[i];
    }
    return out;
}

void TokenSequence::validate(std::size_t max_len) const {
    if (tokens.size() != tags.size()) fail(ErrorKind::LengthMismatch, "tokens and POS tags differ in length");
    if (tokens.empty() || tokens[0] != kClsToken) fail(ErrorKind::FormatError, "sequence must start with [CLS]");
    if (tokens.size() > max_len) fail(ErrorKind::TooLong, std::to_string(tokens.size()) + " tokens exceed max length " + std::to_string(max_len));
}

// ---- dictionary -------------------------------------------------------------

const std::vector<std::string>& builtin_function_word_list() {
    static const std::vector<std::string> words = {
        "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "do", "does", "did",
        "will", "would", "shall", "should", "may", "might", "must", "can", "could", "ought", "dare", "need",
        "used", "to", "a", "an", "the", "and", "but", "if", "or", "because", "as", "until", "while", "of",
        "at", "by", "for", "with", "about", "against", "between", "into", "through", "during", "before",
        "after", "above", "below", "to", "from", "in", "out", "on", "off", "over", "under", "again",
        "further", "then", "once", "here", "there", "when", "where", "why", "how", "all", "any", "both",
        "each", "few", "more", "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same",
        "so", "than", "too", "very"};
    return words;
}

FunctionWordDictionary FunctionWordDictionary::builtin() {
    return from_words(builtin_function_word_list(), "builtin");
}

FunctionWordDictionary FunctionWordDictionary::empty() {
    FunctionWordDictionary d;
    d.source_ = "empty";
    return d;
}

FunctionWordDictionary FunctionWordDictionary::from_words(const std::vector<std::string>& words, std::string source) {
    FunctionWordDictionary d;
    d.source_ = std::move(source);
    for (const std::string& w : words) {
        if (w.empty()) fail(ErrorKind::FormatError, "empty dictionary entry");
        for (unsigned char c : w) {
            if (std::isspace(c) || std::isupper(c)) {
                fail(ErrorKind::FormatError, "dictionary entry '" + w + "' must be a single lowercase token");
            }
        }
        d.entries_.insert(w);
    }
    return d;
}

FunctionWordDictionary FunctionWordDictionary::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open dictionary " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        auto last = line.find_last_not_of(" \t\r");
        words.push_back(line.substr(first, last - first + 1));
    }
    return from_words(words, path);
}

bool FunctionWordDictionary::contains(std::string_view word) const { return entries_.find(word) != entries_.end(); }

// ---- masks and tokenization -----------------------------------------------------

std::size_t TokenMask::count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

TokenSequence tokenize(std::string_view text, std::size_t max_len) {
    if (max_len == 0) fail(ErrorKind::InvalidConfig, "max_len must be at least 1");
    TokenSequence seq;
    seq.tokens.emplace_back(kClsToken);
    std::string current;
    auto flush = [&] {
        if (!current.empty()) seq.tokens.push_back(std::move(current));
        current.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            seq.tokens.emplace_back(1, static_cast<char>(c));
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    if (seq.tokens.size() == 1) fail(ErrorKind::EmptyText, "text contains no tokens");
    if (seq.tokens.size() > max_len) seq.tokens.resize(max_len);
    seq.tags.assign(seq.tokens.size(), PosTag::Other);
    return seq;
}

TokenMask all_tokens_mask(const TokenSequence& seq) { return TokenMask{std::vector<std::uint8_t>(seq.size(), 1)}; }

TokenMask function_word_mask(const TokenSequence& seq, const FunctionWordDictionary& dict) {
    TokenMask m;
    m.bits.resize(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) m.bits[i] = (i == 0 || dict.contains(seq.tokens[i])) ? 1 : 0;
    return m;
}

TokenSequence remove_by_class(const TokenSequence& seq, WordClass cls) {
    if (seq.tokens.size() != seq.tags.size()) fail(ErrorKind::LengthMismatch, "tokens and POS tags differ in length");
    TokenSequence out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i > 0 && in_class(seq.tags[i], cls)) continue;
        out.tokens.push_back(seq.tokens[i]);
        out.tags.push_back(seq.tags[i]);
    }
    return out;
}

TokenSequence remove_dictionary_words(const TokenSequence& seq, const FunctionWordDictionary& dict) {
    if (seq.tokens.size() != seq.tags.size()) fail(ErrorKind::LengthMismatch, "tokens and POS tags differ in length");
    TokenSequence out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i > 0 && dict.contains(seq.tokens[i])) continue;
        out.tokens.push_back(seq.tokens[i]);
        out.tags.push_back(seq.tags[i]);
    }
    return out;
}

// ---- adaptive selection -----------------------------------------------------

std::string_view to_string(AdaptiveStrategy s) {
    switch (s) {
    case AdaptiveStrategy::SimDelta: return "sim_delta";
    case AdaptiveStrategy::Sim2Delta: return "sim_2delta";
    case AdaptiveStrategy::SimN: return "sim_n";
    }
    return "sim_delta";
}

AdaptiveStrategy parse_adaptive_strategy(std::string_view name) {
    for (auto s : {AdaptiveStrategy::SimDelta, AdaptiveStrategy::Sim2Delta, AdaptiveStrategy::SimN}) {
        if (to_string(s) == name) return s;
    }
    fail(ErrorKind::ParseError, "unknown adaptive strategy '" + std::string(name) + "'");
}

AdaptiveSelection select_adaptive(const TokenSequence& seq, std::span<const double> sims, AdaptiveStrategy strategy,
                                  const FunctionWordDictionary& dict) {
    if (sims.size() != seq.size()) {
        fail(ErrorKind::LengthMismatch, std::to_string(sims.size()) + " similarities for " + std::to_string(seq.size()) + " tokens");
    }
    AdaptiveSelection sel;
    sel.mask.bits.assign(seq.size(), 0);
    if (!sel.mask.bits.empty()) sel.mask.bits[0] = 1;
    const std::size_t n = seq.size() > 0 ? seq.size() - 1 : 0;
    if (n == 0) return sel;

    if (strategy == AdaptiveStrategy::SimN) {
        std::size_t quota = 0;
        for (std::size_t i = 1; i < seq.size(); ++i) quota += dict.contains(seq.tokens[i]) ? 1 : 0;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{1});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] < sims[b]; });
        for (std::size_t i = 0; i < quota; ++i) sel.mask.bits[order[i]] = 1;
    } else {
        double mu = 0;
        for (std::size_t i = 1; i < seq.size(); ++i) mu += sims[i];
        mu /= static_cast<double>(n);
        double var = 0;
        for (std::size_t i = 1; i < seq.size(); ++i) var += (sims[i] - mu) * (sims[i] - mu);
        const double delta = std::sqrt(var / static_cast<double>(n));
        const double threshold = mu - (strategy == AdaptiveStrategy::SimDelta ? 1.0 : 2.0) * delta;
        for (std::size_t i = 1; i < seq.size(); ++i) sel.mask.bits[i] = sims[i] < threshold ? 1 : 0;
    }

    std::size_t in_dict = 0;
    for (std::size_t i = 1; i < seq.size(); ++i) {
        if (!sel.mask.bits[i]) continue;
        ++sel.selected;
        in_dict += dict.contains(seq.tokens[i]) ? 1 : 0;
    }
    if (sel.selected > 0) sel.dictionary_fraction = static_cast<double>(in_dict) / static_cast<double>(sel.selected);
    return sel;
}

} // namespace fda

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fda {

enum class PosTag { Noun, Adj, Verb, Func, Punct, Other };

// Word classes accepted by remove_by_class. Content = Noun | Adj | Verb.
enum class WordClass { Noun, Adj, Verb, Func, Content };

std::string_view to_string(PosTag tag);
PosTag parse_pos_tag(std::string_view name);
std::string_view to_string(WordClass cls);
WordClass parse_word_class(std::string_view name);
bool in_class(PosTag tag, WordClass cls);

inline constexpr std::string_view kClsToken = "[CLS]";

struct TokenSequence {
    std::vector<std::string> tokens;
    std::vector<PosTag> tags;

    std::size_t size() const { return tokens.size(); }
    // Tokens after [CLS] joined by single spaces.
    std::string joined() const;
    // Throws LengthMismatch / FormatError when an invariant is broken.
    void validate(std::size_t max_len) const;

    bool operator==(const TokenSequence&) const = default;
};

class FunctionWordDictionary {
public:
    static FunctionWordDictionary builtin();
    static FunctionWordDictionary empty();
    static FunctionWordDictionary from_words(const std::vector<std::string>& words, std::string source);
    // One lowercase token per line; blank lines and '#' comment lines ignored.
    static FunctionWordDictionary from_file(const std::string& path);

    bool contains(std::string_view word) const;
    std::size_t size() const { return entries_.size(); }
    const std::set<std::string, std::less<>>& entries() const { return entries_; }
    const std::string& source() const { return source_; }

private:
    std::set<std::string, std::less<>> entries_;
    std::string source_;
};

// The shortlisted function-word list exactly as published, duplicates included.
const std::vector<std::string>& builtin_function_word_list();

struct TokenMask {
    std::vector<std::uint8_t> bits;

    std::size_t size() const { return bits.size(); }
    std::size_t count() const;
    bool operator==(const TokenMask&) const = default;
};

TokenSequence tokenize(std::string_view text, std::size_t max_len);
TokenMask all_tokens_mask(const TokenSequence& seq);
TokenMask function_word_mask(const TokenSequence& seq, const FunctionWordDictionary& dict);
TokenSequence remove_by_class(const TokenSequence& seq, WordClass cls);
// Deletes every non-[CLS] token found in the dictionary.
TokenSequence remove_dictionary_words(const TokenSequence& seq, const FunctionWordDictionary& dict);

enum class AdaptiveStrategy { SimDelta, Sim2Delta, SimN };

std::string_view to_string(AdaptiveStrategy s);
AdaptiveStrategy parse_adaptive_strategy(std::string_view name);

struct AdaptiveSelection {
    TokenMask mask;                 // [CLS] plus the selected tokens
    std::size_t selected = 0;       // selected tokens, [CLS] excluded
    // Share of selected tokens found in the dictionary; empty when nothing is selected.
    std::optional<double> dictionary_fraction;
};

AdaptiveSelection select_adaptive(const TokenSequence& seq, std::span<const double> sims, AdaptiveStrategy strategy,
                                  const FunctionWordDictionary& dict);

} // namespace fda

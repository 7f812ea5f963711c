#include "doctest.h"

#include "fda/corpus.hpp"
#include "fda/error.hpp"

#include "support.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace fda;

using support::CapturedWarnings;
using support::read_file;

TEST_CASE("generation is deterministic") {
    auto a = generate(42, 8);
    auto b = generate(42, 8);
    REQUIRE(a.size() == 8);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(items_equal(a[i], b[i]));
    auto c = generate(43, 8);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) any_diff |= !items_equal(a[i], c[i]);
    CHECK(any_diff);
    // items are independent of corpus size
    CHECK(items_equal(generate(42, 20)[3], a[3]));
}

TEST_CASE("generated items are well formed") {
    auto items = generate(7, 128);
    auto dict = FunctionWordDictionary::builtin();
    const Grammar& g = Grammar::standard();
    std::set<std::uint64_t> ids;
    std::size_t train = 0;
    for (const auto& it : items) {
        ids.insert(it.id);
        CHECK(it.image.shape() == Shape{kImageSide, kImageSide, kImageChannels});
        for (Scalar v : it.image.data()) {
            REQUIRE(v >= 0);
            REQUIRE(v <= 1);
        }
        TokenSequence seq = it.tokens(64);
        CHECK(seq.size() == it.pos_tags.size());
        CHECK(seq.tokens[0] == kClsToken);
        for (std::size_t i = 1; i < seq.size(); ++i) {
            CHECK(seq.tags[i] == g.tag_of(seq.tokens[i]));
            if (seq.tags[i] == PosTag::Func) CHECK(dict.contains(seq.tokens[i]));
        }
        if (it.split == Split::Train) ++train;
    }
    CHECK(ids.size() == 128);
    CHECK(train == 96);
    CHECK(select_split(items, Split::Test).size() == 32);
    CHECK(select_split(items, Split::Test).front().id == 96);
    CHECK_THROWS_AS(generate(1, 0), Error);
}

TEST_CASE("grammar tags drive class removal") {
    TokenSequence s = Grammar::standard().tag(tokenize("A red circle is above the blue square.", 16));
    CHECK(remove_by_class(s, WordClass::Func).tokens ==
          std::vector<std::string>{"[CLS]", "red", "circle", "blue", "square", "."});
    CHECK(remove_by_class(s, WordClass::Noun).tokens ==
          std::vector<std::string>{"[CLS]", "a", "red", "is", "above", "the", "blue", "."});
    CHECK(Grammar::standard().tag_of("zebra") == PosTag::Other);
}

TEST_CASE("vocabulary is sorted and covers captions") {
    auto vocab = Grammar::standard().vocabulary();
    CHECK(std::is_sorted(vocab.begin(), vocab.end()));
    std::set<std::string> known(vocab.begin(), vocab.end());
    for (const auto& it : generate(3, 64))
        for (std::size_t i = 1; i < it.tokens(64).size(); ++i) CHECK(known.count(it.tokens(64).tokens[i]) == 1);
}

TEST_CASE("base64") {
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("fo") == "Zm8=");
    CHECK(base64_encode("foo") == "Zm9v");
    CHECK(base64_encode("foobar") == "Zm9vYmFy");
    for (std::string s : {"", "f", "fo", "foo", "foob", "fooba", "foobar"}) CHECK(base64_decode(base64_encode(s)) == s);
    std::string bin;
    for (int i = 0; i < 256; ++i) bin += static_cast<char>(i);
    CHECK(base64_decode(base64_encode(bin)) == bin);
    CHECK_THROWS_AS(base64_decode("abc"), Error);
    CHECK_THROWS_AS(base64_decode("a=bc"), Error);
}

TEST_CASE("corpus round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "fda_test_corpus";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto items = generate(11, 10);

    for (auto storage : {ImageStorage::Inline, ImageStorage::External}) {
        const std::string path = (dir / (storage == ImageStorage::Inline ? "inline.jsonl" : "external.jsonl")).string();
        save_corpus(items, path, storage);
        auto loaded = load_corpus(path);
        REQUIRE(loaded.size() == items.size());
        for (std::size_t i = 0; i < items.size(); ++i) CHECK(items_equal(items[i], loaded[i]));
    }

    SUBCASE("truncated file") {
        const std::string path = (dir / "inline.jsonl").string();
        std::string bytes = read_file(path);
        {
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            out << bytes.substr(0, bytes.size() / 2);
        }
        try {
            load_corpus(path);
            FAIL("expected FormatError");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::FormatError);
        }
    }
    SUBCASE("missing tags default to OTHER") {
        const std::string path = (dir / "external.jsonl").string();
        {
            std::ofstream out(path, std::ios::trunc);
            out << R"({"format":"fdacorpus","version":1,"count":1})" << '\n'
                << R"({"id":0,"caption":"a red circle.","split":"test","image":"external_images/0.ften"})" << '\n';
        }
        CapturedWarnings w;
        auto loaded = load_corpus(path);
        REQUIRE(loaded.size() == 1);
        CHECK(loaded[0].pos_tags == std::vector<PosTag>(5, PosTag::Other));
        CHECK(w.codes == std::vector<std::string>{"DefaultedPosTags"});
    }
    SUBCASE("count mismatch and bad header") {
        const std::string path = (dir / "bad.jsonl").string();
        {
            std::ofstream out(path, std::ios::trunc);
            out << R"({"format":"fdacorpus","version":1,"count":3})" << '\n';
        }
        CHECK_THROWS_AS(load_corpus(path), Error);
        {
            std::ofstream out(path, std::ios::trunc);
            out << R"({"format":"other","version":1,"count":0})" << '\n';
        }
        CHECK_THROWS_AS(load_corpus(path), Error);
        CHECK_THROWS_AS(load_corpus((dir / "missing.jsonl").string()), Error);
    }
    fs::remove_all(dir);
}

#include "fda/corpus.hpp"

#include "fda/error.hpp"
#include "fda/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fda {

namespace {

struct Rgb {
    int r, g, b;  // 0..255
};

// parallel to Grammar::colors()
const std::array<Rgb, 6> kPalette = {{
    {230, 25, 25},    // red
    {25, 200, 40},    // green
    {30, 60, 230},    // blue
    {235, 225, 30},   // yellow
    {150, 30, 200},   // purple
    {245, 245, 245},  // white
}};

constexpr std::size_t kCell = 16;

} // namespace

// ---- grammar ---------------------------------------------------------------------

Grammar::Grammar()
    : shapes_{"circle", "square", "triangle"},
      colors_{"red", "green", "blue", "yellow", "purple", "white"},
      verbs_{"sits", "rests", "lies"} {
    for (const auto& w : shapes_) table_.emplace_back(w, PosTag::Noun);
    for (const auto& w : colors_) table_.emplace_back(w, PosTag::Adj);
    for (const auto& w : verbs_) table_.emplace_back(w, PosTag::Verb);
    for (const char* w : {"a", "the", "is", "above", "below", "to", "of", "there", "in"}) table_.emplace_back(w, PosTag::Func);
    for (const char* w : {"left", "right", "top", "bottom"}) table_.emplace_back(w, PosTag::Other);
    table_.emplace_back(".", PosTag::Punct);
    std::sort(table_.begin(), table_.end());
}

const Grammar& Grammar::standard() {
    static const Grammar g;
    return g;
}

PosTag Grammar::tag_of(std::string_view word) const {
    auto it = std::lower_bound(table_.begin(), table_.end(), word,
                               [](const auto& entry, std::string_view w) { return entry.first < w; });
    if (it != table_.end() && it->first == word) return it->second;
    return PosTag::Other;
}

TokenSequence Grammar::tag(TokenSequence seq) const {
    seq.tags.resize(seq.tokens.size());
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) seq.tags[i] = i == 0 ? PosTag::Other : tag_of(seq.tokens[i]);
    return seq;
}

std::vector<std::string> Grammar::vocabulary() const {
    std::vector<std::string> words;
    for (const auto& e : table_) words.push_back(e.first);
    return words;
}

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "test") return Split::Test;
    fail(ErrorKind::FormatError, "unknown split '" + std::string(name) + "'");
}

TokenSequence CorpusItem::tokens(std::size_t max_len) const {
    TokenSequence seq = tokenize(caption, max_len);
    if (pos_tags.size() < seq.size()) fail(ErrorKind::LengthMismatch, "item " + std::to_string(id) + " has too few POS tags");
    seq.tags.assign(pos_tags.begin(), pos_tags.begin() + static_cast<std::ptrdiff_t>(seq.size()));
    return seq;
}

// ---- rendering --------------------------------------------------------------------

namespace {

class Canvas {
public:
    explicit Canvas(Rng& rng) : pixels_(kImageSide * kImageSide * kImageChannels) {
        for (auto& p : pixels_) p = static_cast<int>(8 + rng.index(17));
    }

    void put(int x, int y, const Rgb& c) {
        if (x < 0 || y < 0 || x >= static_cast<int>(kImageSide) || y >= static_cast<int>(kImageSide)) return;
        const std::size_t base = (static_cast<std::size_t>(y) * kImageSide + static_cast<std::size_t>(x)) * kImageChannels;
        pixels_[base] = c.r;
        pixels_[base + 1] = c.g;
        pixels_[base + 2] = c.b;
    }

    void draw(std::size_t shape, const Rgb& color, int cx, int cy, int r) {
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                bool inside = false;
                switch (shape) {
                case 0: inside = dx * dx + dy * dy <= r * r; break;
                case 1: inside = std::abs(dx) < r && std::abs(dy) < r; break;
                default: inside = 2 * std::abs(dx) <= dy + r; break;
                }
                if (inside) put(cx + dx, cy + dy, color);
            }
        }
    }

    Tensor to_tensor() const {
        std::vector<Scalar> v(pixels_.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(pixels_[i]) / Scalar{255};
        return Tensor({kImageSide, kImageSide, kImageChannels}, std::move(v));
    }

private:
    std::vector<int> pixels_;
};

struct Placed {
    std::size_t shape, color, col, row;
};

void render(Canvas& canvas, Rng& rng, const Placed& p) {
    const int jitter_x = static_cast<int>(rng.index(3)) - 1;
    const int jitter_y = static_cast<int>(rng.index(3)) - 1;
    const int radius = 5 + static_cast<int>(rng.index(2));
    const int cx = static_cast<int>(p.col * kCell + kCell / 2) + jitter_x;
    const int cy = static_cast<int>(p.row * kCell + kCell / 2) + jitter_y;
    canvas.draw(p.shape, kPalette[p.color], cx, cy, radius);
}

} // namespace

CorpusItem generate_item(std::uint64_t seed, std::uint64_t id, Split split) {
    const Grammar& g = Grammar::standard();
    Rng rng(seed ^ splitmix64(id));
    Canvas canvas(rng);
    std::ostringstream caption;

    if (rng.uniform01() < 0.2) {
        Placed a{rng.index(3), rng.index(kPalette.size()), rng.index(2), rng.index(2)};
        render(canvas, rng, a);
        caption << "there is a " << g.colors()[a.color] << ' ' << g.shapes()[a.shape] << " in the "
                << (a.row == 0 ? "top" : "bottom") << ' ' << (a.col == 0 ? "left" : "right") << '.';
    } else {
        Placed a{rng.index(3), rng.index(kPalette.size()), 0, 0};
        Placed b{rng.index(3), (a.color + 1 + rng.index(kPalette.size() - 1)) % kPalette.size(), 0, 0};
        const std::size_t relation = rng.index(4);  // above, below, left of, right of
        const std::size_t lane = rng.index(2);
        if (relation < 2) {
            a.col = b.col = lane;
            a.row = relation == 0 ? 0 : 1;
            b.row = 1 - a.row;
        } else {
            a.row = b.row = lane;
            a.col = relation == 2 ? 0 : 1;
            b.col = 1 - a.col;
        }
        render(canvas, rng, a);
        render(canvas, rng, b);
        const bool verb = rng.uniform01() < 0.3;
        caption << "a " << g.colors()[a.color] << ' ' << g.shapes()[a.shape] << ' ';
        if (verb) {
            caption << g.verbs()[rng.index(g.verbs().size())] << ' ';
        } else {
            caption << "is ";
        }
        static const char* kRelations[] = {"above", "below", "to the left of", "to the right of"};
        caption << kRelations[relation] << " the " << g.colors()[b.color] << ' ' << g.shapes()[b.shape] << '.';
    }

    CorpusItem item;
    item.id = id;
    item.image = canvas.to_tensor();
    item.caption = caption.str();
    item.pos_tags = g.tag(tokenize(item.caption, 64)).tags;
    item.split = split;
    return item;
}

std::vector<CorpusItem> generate(std::uint64_t seed, std::size_t n, double train_ratio) {
    if (n == 0) fail(ErrorKind::ZeroCount, "corpus size must be at least 1");
    if (!(train_ratio >= 0 && train_ratio <= 1)) fail(ErrorKind::RangeError, "train ratio must lie in [0,1]");
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_ratio));
    std::vector<CorpusItem> items;
    items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) items.push_back(generate_item(seed, i, i < n_train ? Split::Train : Split::Test));
    return items;
}

std::vector<CorpusItem> select_split(const std::vector<CorpusItem>& items, Split split) {
    std::vector<CorpusItem> out;
    std::copy_if(items.begin(), items.end(), std::back_inserter(out), [split](const CorpusItem& it) { return it.split == split; });
    return out;
}

bool items_equal(const CorpusItem& a, const CorpusItem& b) {
    return a.id == b.id && a.caption == b.caption && a.pos_tags == b.pos_tags && a.split == b.split &&
           bitwise_equal(a.image, b.image);
}

// ---- base64 -------------------------------------------------------------------------

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) | (static_cast<std::uint8_t>(bytes[i + 1]) << 8) |
                                static_cast<std::uint8_t>(bytes[i + 2]);
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
    }
    if (i < bytes.size()) {
        std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<std::uint8_t>(bytes[i + 1]) << 8;
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) fail(ErrorKind::FormatError, "base64 length not a multiple of 4");
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::string out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + static_cast<std::size_t>(k)];
            if (c == '=' && i + 4 == text.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                v[k] = value(c);
                if (v[k] < 0 || pad > 0) fail(ErrorKind::FormatError, "invalid base64 payload");
            }
        }
        const std::uint32_t w = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                                (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
        out += static_cast<char>((w >> 16) & 0xff);
        if (pad < 2) out += static_cast<char>((w >> 8) & 0xff);
        if (pad < 1) out += static_cast<char>(w & 0xff);
    }
    return out;
}

// ---- persistence ----------------------------------------------------------------------

namespace {

constexpr const char* kCorpusFormat = "fdacorpus";
constexpr int kCorpusVersion = 1;

void check_image(const Tensor& image, std::uint64_t id) {
    if (image.rank() != 3 || image.dim(2) != kImageChannels) {
        fail(ErrorKind::FormatError, "item " + std::to_string(id) + " image has shape " + shape_string(image.shape()));
    }
    for (Scalar v : image.data()) {
        if (!(v >= 0 && v <= 1)) fail(ErrorKind::FormatError, "item " + std::to_string(id) + " has pixels outside [0,1]");
    }
}

} // namespace

void save_corpus(const std::vector<CorpusItem>& items, const std::string& path, ImageStorage storage) {
    namespace fs = std::filesystem;
    const fs::path file(path);
    const fs::path image_dir_rel = file.stem().string() + "_images";
    if (storage == ImageStorage::External) {
        std::error_code ec;
        fs::create_directories(file.parent_path() / image_dir_rel, ec);
        if (ec) fail(ErrorKind::IoError, "cannot create " + (file.parent_path() / image_dir_rel).string());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
    nlohmann::ordered_json header = {{"format", kCorpusFormat}, {"version", kCorpusVersion}, {"count", items.size()}};
    out << header.dump() << '\n';
    for (const CorpusItem& item : items) {
        nlohmann::ordered_json rec;
        rec["id"] = item.id;
        rec["caption"] = item.caption;
        std::vector<std::string> tags;
        for (PosTag t : item.pos_tags) tags.emplace_back(to_string(t));
        rec["pos_tags"] = tags;
        rec["split"] = std::string(to_string(item.split));
        if (storage == ImageStorage::Inline) {
            rec["image_b64"] = base64_encode(encode_ften(item.image));
        } else {
            const fs::path rel = image_dir_rel / (std::to_string(item.id) + ".ften");
            save_ften((file.parent_path() / rel).string(), item.image);
            rec["image"] = rel.generic_string();
        }
        out << rec.dump() << '\n';
    }
    if (!out) fail(ErrorKind::IoError, "write to " + path + " failed");
}

std::vector<CorpusItem> load_corpus(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open corpus " + path);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::FormatError, "empty corpus file " + path);

    std::size_t expected = 0;
    try {
        auto header = nlohmann::json::parse(line);
        if (header.at("format").get<std::string>() != kCorpusFormat) fail(ErrorKind::FormatError, "bad corpus magic");
        if (header.at("version").get<int>() != kCorpusVersion) fail(ErrorKind::FormatError, "unsupported corpus version");
        expected = header.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::FormatError, std::string("corpus header: ") + e.what());
    }

    std::vector<CorpusItem> items;
    std::size_t defaulted = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto rec = nlohmann::json::parse(line);
            CorpusItem item;
            item.id = rec.at("id").get<std::uint64_t>();
            item.caption = rec.at("caption").get<std::string>();
            item.split = rec.contains("split") ? parse_split(rec["split"].get<std::string>()) : Split::Test;
            if (rec.contains("image_b64")) {
                item.image = decode_ften(base64_decode(rec["image_b64"].get<std::string>()));
            } else if (rec.contains("image")) {
                fs::path img = fs::path(rec["image"].get<std::string>());
                if (img.is_relative()) img = fs::path(path).parent_path() / img;
                item.image = load_ften(img.string());
            } else {
                fail(ErrorKind::FormatError, "record has no image");
            }
            check_image(item.image, item.id);
            const std::size_t n_tokens = tokenize(item.caption, 1u << 20).size();
            if (rec.contains("pos_tags")) {
                for (const auto& t : rec["pos_tags"]) item.pos_tags.push_back(parse_pos_tag(t.get<std::string>()));
                if (item.pos_tags.size() != n_tokens) fail(ErrorKind::FormatError, "pos_tags not parallel to caption tokens");
            } else {
                item.pos_tags.assign(n_tokens, PosTag::Other);
                ++defaulted;
            }
            items.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::FormatError, path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::FormatError || e.kind() == ErrorKind::IoError) throw;
            fail(ErrorKind::FormatError, path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (items.size() != expected) {
        fail(ErrorKind::FormatError, path + ": expected " + std::to_string(expected) + " records, found " + std::to_string(items.size()));
    }
    if (defaulted > 0) {
        warn("DefaultedPosTags", std::to_string(defaulted) + " record(s) in " + path + " carry no POS tags; defaulted to OTHER");
    }
    return items;
}

} // namespace fda

#pragma once

#include "oracles.hpp"

#include "fda/attention.hpp"
#include "fda/tensor.hpp"

#include <functional>
#include <vector>

namespace opcases {

using Build = std::function<fda::Tensor(const std::vector<fda::Tensor>&)>;

struct Case {
    const char* name;
    std::vector<fda::Shape> shapes;  // leaf shapes, filled with uniform(-2, 2)
    Build build;
};

// Every differentiable op, one small instance each.
inline std::vector<Case> tensor_ops() {
    using namespace fda;
    return {
        {"matmul", {{3, 4}, {4, 2}}, [](auto& l) { return matmul(l[0], l[1]); }},
        {"add", {{3, 2}, {3, 2}}, [](auto& l) { return add(l[0], l[1]); }},
        {"sub", {{3, 2}, {3, 2}}, [](auto& l) { return sub(l[0], l[1]); }},
        {"mul", {{3, 2}, {3, 2}}, [](auto& l) { return mul(l[0], l[1]); }},
        {"add_row", {{3, 4}, {4}}, [](auto& l) { return add_row(l[0], l[1]); }},
        {"scale", {{2, 3}}, [](auto& l) { return scale(l[0], -1.7); }},
        {"scale_by", {{2, 3}, {1}}, [](auto& l) { return scale_by(l[0], l[1]); }},
        {"elementwise_min", {{4, 3}, {4, 3}}, [](auto& l) { return elementwise_min(l[0], l[1]); }},
        {"transpose", {{2, 5}}, [](auto& l) { return transpose(l[0]); }},
        {"concat0", {{2, 3}, {1, 3}}, [](auto& l) { return concat({l[0], l[1]}, 0); }},
        {"concat1", {{2, 3}, {2, 2}}, [](auto& l) { return concat({l[0], l[1]}, 1); }},
        {"masked_fill", {{2, 3}}, [](auto& l) { return masked_fill(l[0], {1, 0, 0, 1, 0, 1}, -5); }},
        {"slice", {{4, 5}}, [](auto& l) { return slice(l[0], 1, 1, 3); }},
        {"reshape", {{2, 6}}, [](auto& l) { return reshape(l[0], {3, 4}); }},
        {"sum", {{3, 3}}, [](auto& l) { return sum(l[0]); }},
        {"mean", {{3, 3}}, [](auto& l) { return mean(l[0]); }},
        {"softmax-1", {{3, 5}}, [](auto& l) { return softmax(l[0], -1); }},
        {"softmax-2", {{3, 5}}, [](auto& l) { return softmax(l[0], -2); }},
        {"sigmoid", {{2, 4}}, [](auto& l) { return sigmoid(l[0]); }},
        {"gelu", {{2, 4}}, [](auto& l) { return gelu(l[0]); }},
        {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& l) { return layer_norm(l[0], l[1], l[2]); }},
        {"embedding", {{5, 3}}, [](auto& l) { return embedding(l[0], {4, 0, 4, 2}); }},
        {"patchify", {{4, 4, 3}}, [](auto& l) { return patchify(l[0], 2); }},
        {"bce", {{6}}, [](auto& l) { return bce_with_logits(l[0], {1, 0, 1, 1, 0, 0}); }},
        {"select", {{2, 3}, {2, 3}}, [](auto& l) { return select({1, 0, 1, 0, 0, 1}, l[0], l[1]); }},
    };
}

// Attention blocks with fixed random weights; leaves are the activations and,
// for de-attention, the raw learnable gate.
inline std::vector<Case> attention_ops() {
    using namespace fda;
    auto params = [] {
        Rng rng(77);
        return oracle::random_attention(rng, 4, 2, 2);
    };
    auto gates = [](const Tensor& raw) {
        GateParam g = GateParam::learnable();
        g.raw = raw;
        return std::vector<GateParam>{g, g};
    };
    return {
        {"multihead_attention", {{3, 4}, {5, 4}}, [params](auto& l) { return multihead_attention(l[0], l[1], params()); }},
        {"fda_multihead", {{3, 4}, {3, 4}, {5, 4}, {1}},
         [params, gates](auto& l) {
             return fda_multihead(l[0], l[1], l[2], params(), gates(l[3]), parse_placement("L0,Hall"), 0);
         }},
        {"fda_self_attention", {{4, 4}, {4, 4}, {1}},
         [params, gates](auto& l) { return fda_self_attention(l[0], l[1], params(), gates(l[2]), {1, 1}); }},
        {"fda_subtract", {{3, 4}, {3, 4}, {3, 4}, {1}},
         [](auto& l) { return fda_subtract(l[0], l[1], l[2], sigmoid(l[3])); }},
    };
}

} // namespace opcases

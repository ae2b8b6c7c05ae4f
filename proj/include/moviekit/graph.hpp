#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "moviekit/tensor.hpp"

namespace moviekit {

// Reverse-mode tape over dense tensors. Ops append nodes; backward() walks the
// tape in reverse creation order. Node handles are plain ids so the node
// vector may reallocate freely.

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
    bool trainable = true;
};

struct ParamStore {
    std::vector<std::unique_ptr<Param>> items;
    std::unordered_map<std::string, Param*> by_name;

    Param& add(const std::string& name, Tensor init);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const { return by_name.count(name) > 0; }
    void zero_grads();
    int64_t param_count() const;
    // FNV-1a over raw value bytes in insertion order; used to pin frozen weights.
    uint64_t checksum() const;
};

class Graph {
   public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_ready = false;
        Param* param = nullptr;
        std::function<void(Graph&, int32_t)> back;
    };

    Var leaf(Tensor v, bool requires_grad = false);
    Var constant(Tensor v) { return leaf(std::move(v), false); }
    Var param(Param& p);

    const Tensor& val(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    // Seeds d(loss)/d(loss)=1 on a {1} node and runs the tape backward.
    void backward(Var loss);
    // Adds node grads into their Param::grad, scaled (e.g. 1/batch).
    void accumulate_param_grads(float scale = 1.f);

    void clear();
    size_t num_nodes() const { return nodes_.size(); }

    // op-builder internals
    Var make(Tensor value, bool requires_grad, std::function<void(Graph&, int32_t)> back);
    Tensor& grad_buf(int32_t id);
    Node& node(int32_t id) { return nodes_[id]; }

   private:
    std::vector<Node> nodes_;
};

// ---- elementwise / scalar ----
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, float s);
Var offset(Graph& g, Var a, float c);
Var add_scaled(Graph& g, Var a, Var b, float sb);  // a + sb*b
Var silu(Graph& g, Var a);
Var sigmoid(Graph& g, Var a);
Var relu(Graph& g, Var a);

// ---- matrix ----
Var matmul(Graph& g, Var a, Var b);     // {m,k}x{k,n}
Var matmul_nt(Graph& g, Var a, Var b);  // {m,k}x{n,k}^T -> {m,n}
Var row_bias_add(Graph& g, Var x, Var b);
Var linear(Graph& g, Var x, Var w, Var b);  // x{n,in}, w{out,in}, b{out}
Var softmax_rows(Graph& g, Var x);
Var concat_rows(Graph& g, const std::vector<Var>& xs);

// ---- feature maps {C,H,W} ----
Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad);
Var upsample2x(Graph& g, Var x);
Var concat_ch(Graph& g, Var a, Var b);
Var chan_bias_add(Graph& g, Var x, Var b);   // b{C} broadcast over HW
Var channel_dot(Graph& g, Var x, Var v);     // {C,H,W},{C} -> {1,H,W}
Var chw_to_tokens(Graph& g, Var x);          // {C,H,W} -> {H*W,C}
Var tokens_to_chw(Graph& g, Var x, int h, int w);
Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, float eps = 1e-5f);

// ---- reductions ----
Var sum_all(Graph& g, Var x);
Var mean_all(Graph& g, Var x);
Var mse_loss(Graph& g, Var a, Var b);

struct AdamOpt {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t step = 0;

    void update(ParamStore& params);
};

}  // namespace moviekit

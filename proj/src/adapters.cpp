#include "nsc/adapters.hpp"

#include <algorithm>
#include <stdexcept>

#include "nsc/linalg.hpp"
#include "nsc/strfmt.hpp"
#include "nsc/tensor_store.hpp"

namespace nsc::lora {

using store::io_error;
using store::IoErrorKind;

LoraAdapter make_adapter(std::string layer_id, Matrix b, Matrix a) {
    if (layer_id.empty() || layer_id.find('/') != std::string::npos)
        throw std::invalid_argument("adapter layer id must be non-empty and '/'-free: '" + layer_id +
                                    "'");
    if (b.cols != a.rows)
        throw std::invalid_argument(strfmt("adapter %s: b is %s but a is %s", layer_id.c_str(),
                                           shape_str(b).c_str(), shape_str(a).c_str()));
    std::size_t rank = a.rows;
    if (rank < 1) throw std::invalid_argument("adapter " + layer_id + ": rank must be >= 1");
    if (rank > std::min(b.rows, a.cols))
        throw std::invalid_argument(strfmt("adapter %s: rank %zu exceeds min(d_out=%zu, d_in=%zu)",
                                           layer_id.c_str(), rank, b.rows, a.cols));
    return LoraAdapter{std::move(layer_id), std::move(b), std::move(a), rank};
}

const LoraAdapter& AdapterSet::at(const std::string& layer) const {
    auto it = adapters.find(layer);
    if (it == adapters.end())
        throw std::invalid_argument("task '" + task_id + "' has no adapter at layer '" + layer + "'");
    return it->second;
}

std::vector<std::string> AdapterSet::layer_ids() const {
    std::vector<std::string> out;
    out.reserve(adapters.size());
    for (const auto& [id, _] : adapters) out.push_back(id);
    return out;
}

double MergeCoefficients::at(const std::string& task, const std::string& layer) const {
    auto t = values.find(task);
    if (t != values.end()) {
        auto l = t->second.find(layer);
        if (l != t->second.end()) return l->second;
    }
    throw std::invalid_argument("no merge coefficient for (" + task + ", " + layer + ")");
}

void MergeCoefficients::set(const std::string& task, const std::string& layer, double v) {
    values[task][layer] = v;
}

MergeCoefficients MergeCoefficients::constant(const std::vector<std::string>& tasks,
                                              const std::vector<std::string>& layers, double v) {
    MergeCoefficients c;
    for (const auto& t : tasks)
        for (const auto& l : layers) c.values[t][l] = v;
    return c;
}

Matrix delta(const LoraAdapter& adapter) { return linalg::matmul(adapter.b, adapter.a); }

Matrix merged_update(const std::vector<AdapterSet>& sets, const MergeCoefficients& coeffs,
                     const std::string& layer) {
    if (sets.empty()) throw std::invalid_argument("merged_update: no adapter sets");
    Matrix acc;
    for (const auto& set : sets) {
        const LoraAdapter& ad = set.at(layer);
        Matrix d = delta(ad);
        if (acc.empty()) {
            acc = Matrix(d.rows, d.cols);
        } else if (!acc.same_shape(d)) {
            throw std::runtime_error(strfmt("merged_update: layer '%s' is %s for task '%s' but %s earlier",
                                            layer.c_str(), shape_str(d).c_str(), set.task_id.c_str(),
                                            shape_str(acc).c_str()));
        }
        linalg::axpy(acc, coeffs.at(set.task_id, layer), d);
    }
    return acc;
}

void save_adapter_set(const AdapterSet& set, const std::filesystem::path& dir) {
    if (set.task_id.empty() || set.task_id.find('/') != std::string::npos)
        throw std::invalid_argument("task id must be non-empty and '/'-free: '" + set.task_id + "'");
    std::vector<store::NamedTensor> tensors;
    for (const auto& [layer, ad] : set.adapters) {
        tensors.push_back({set.task_id + "/" + layer + "/A", ad.a});
        tensors.push_back({set.task_id + "/" + layer + "/B", ad.b});
    }
    store::save_tensors(dir, tensors);
}

AdapterSet load_adapter_set(const std::filesystem::path& dir) {
    auto tensors = store::load_tensors(dir);
    AdapterSet set;
    std::map<std::string, std::pair<const Matrix*, const Matrix*>> parts;  // layer -> (A, B)
    for (const auto& t : tensors) {
        auto first = t.name.find('/');
        auto last = t.name.rfind('/');
        if (first == std::string::npos || first == last)
            throw io_error(IoErrorKind::BadTensorName,
                           "tensor name is not task/layer/part: '" + t.name + "'");
        std::string task = t.name.substr(0, first);
        std::string layer = t.name.substr(first + 1, last - first - 1);
        std::string part = t.name.substr(last + 1);
        if (task.empty() || layer.empty())
            throw io_error(IoErrorKind::BadTensorName, "empty component in tensor name: '" + t.name + "'");
        if (set.task_id.empty()) {
            set.task_id = task;
        } else if (set.task_id != task) {
            throw io_error(IoErrorKind::BadTensorName,
                           "container mixes tasks '" + set.task_id + "' and '" + task + "'");
        }
        auto& slot = parts[layer];
        if (part == "A") {
            if (slot.first) throw io_error(IoErrorKind::BadTensorName, "duplicate A for layer " + layer);
            slot.first = &t.value;
        } else if (part == "B") {
            if (slot.second) throw io_error(IoErrorKind::BadTensorName, "duplicate B for layer " + layer);
            slot.second = &t.value;
        } else {
            throw io_error(IoErrorKind::BadTensorName, "tensor part must be A or B: '" + t.name + "'");
        }
    }
    for (const auto& [layer, slot] : parts) {
        if (!slot.first || !slot.second)
            throw io_error(IoErrorKind::CountMismatch,
                           "layer '" + layer + "' is missing its " + (slot.first ? "B" : "A") + " tensor");
        try {
            set.adapters.emplace(layer, make_adapter(layer, *slot.second, *slot.first));
        } catch (const std::invalid_argument& e) {
            throw io_error(IoErrorKind::ShapeMismatch, e.what());
        }
    }
    return set;
}

}  // namespace nsc::lora

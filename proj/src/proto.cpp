#include "grad2task/proto.hpp"

#include <stdexcept>
#include <string>

namespace g2t {

Tensor compute_prototypes(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                          std::size_t num_classes) {
    if (embeddings.empty()) throw std::invalid_argument("compute_prototypes: no embeddings");
    if (embeddings.size() != labels.size()) {
        throw std::invalid_argument("compute_prototypes: " + std::to_string(embeddings.size()) +
                                    " embeddings vs " + std::to_string(labels.size()) + " labels");
    }
    std::vector<std::vector<Tensor>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int c = labels[i];
        if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
            throw std::invalid_argument("compute_prototypes: label " + std::to_string(c) +
                                        " out of range for " + std::to_string(num_classes) +
                                        " classes");
        }
        by_class[static_cast<std::size_t>(c)].push_back(embeddings[i]);
    }
    std::size_t d = embeddings[0].dim(0);
    std::vector<Tensor> rows;
    rows.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (by_class[c].empty()) {
            throw std::invalid_argument("compute_prototypes: class " + std::to_string(c) +
                                        " has no support examples");
        }
        Tensor sum = by_class[c][0];
        for (std::size_t i = 1; i < by_class[c].size(); ++i) sum = add(sum, by_class[c][i]);
        rows.push_back(scale(sum, 1.0 / static_cast<double>(by_class[c].size())));
    }
    return reshape(concat(rows), {num_classes, d});
}

Tensor class_logits(const Tensor& prototypes, const Tensor& query) {
    if (prototypes.rank() != 2 || query.rank() != 1 || prototypes.dim(1) != query.dim(0)) {
        throw std::invalid_argument("class_logits: prototypes " + shape_str(prototypes.shape()) +
                                    " vs query " + shape_str(query.shape()));
    }
    std::size_t num_classes = prototypes.dim(0);
    std::vector<Tensor> logits;
    logits.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        Tensor diff = sub(query, row(prototypes, c));
        logits.push_back(neg(sum_all(square(diff))));
    }
    return concat(logits);
}

Tensor protonet_loss(const Tensor& prototypes, const std::vector<Tensor>& query_embeddings,
                     const std::vector<int>& labels, double* accuracy) {
    if (query_embeddings.empty()) throw std::invalid_argument("protonet_loss: empty query set");
    if (query_embeddings.size() != labels.size()) {
        throw std::invalid_argument("protonet_loss: query/label count mismatch");
    }
    std::size_t num_classes = prototypes.dim(0);
    std::vector<Tensor> nlls;
    nlls.reserve(query_embeddings.size());
    std::size_t correct = 0;
    for (std::size_t j = 0; j < query_embeddings.size(); ++j) {
        int y = labels[j];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw std::invalid_argument("protonet_loss: label " + std::to_string(y) +
                                        " out of range");
        }
        Tensor logits = class_logits(prototypes, query_embeddings[j]);
        Tensor lsm = log_softmax(logits);
        nlls.push_back(neg(pick(lsm, static_cast<std::size_t>(y))));
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < num_classes; ++c) {
            if (logits.value_at(c) > logits.value_at(argmax)) argmax = c;
        }
        if (argmax == static_cast<std::size_t>(y)) ++correct;
    }
    if (accuracy) *accuracy = static_cast<double>(correct) / double(query_embeddings.size());
    return scale(sum_all(concat(nlls)), 1.0 / static_cast<double>(nlls.size()));
}

} // namespace g2t

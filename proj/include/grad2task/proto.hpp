#pragma once

#include <vector>

#include "grad2task/tensor.hpp"

namespace g2t {

/// Per-class mean of the given embeddings; result is [num_classes, D].
/// Throws if any class id is out of range or has no examples.
Tensor compute_prototypes(const std::vector<Tensor>& embeddings, const std::vector<int>& labels,
                          std::size_t num_classes);

/// Classification scores for one query embedding against a prototype
/// matrix: logit_c = -||q - mu_c||^2. Higher means closer.
Tensor class_logits(const Tensor& prototypes, const Tensor& query);

/// Mean negative log-likelihood of the query set under the softmax over
/// negated squared distances. Optionally reports argmax accuracy.
Tensor protonet_loss(const Tensor& prototypes, const std::vector<Tensor>& query_embeddings,
                     const std::vector<int>& labels, double* accuracy = nullptr);

} // namespace g2t

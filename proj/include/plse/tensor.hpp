#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "plse/common.hpp"

namespace plse {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Non-owning view of one named parameter array.
template <class S>
struct TensorRef {
  std::string name;
  S* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool is_matrix() const { return rows > 1 && cols > 1; }
};

template <class S>
void add_ref(std::vector<TensorRef<S>>& out, const std::string& name, Mat<S>& m) {
  out.push_back({name, m.data(), m.rows(), m.cols()});
}

template <class S>
void add_ref(std::vector<TensorRef<S>>& out, const std::string& name, RowVec<S>& v) {
  out.push_back({name, v.data(), 1, v.cols()});
}

template <class S>
void fill_normal(Mat<S>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(stddev * normal(rng));
}

/// Sets every tensor of `p` to zero.
template <class P>
void zero_all(P& p) {
  for (auto& t : p.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = 0;
}

/// Elementwise dst += src for two structurally identical parameter sets.
template <class P>
void accumulate(P& dst, P& src) {
  auto a = dst.tensors();
  auto b = src.tensors();
  if (a.size() != b.size()) throw Error("accumulate: layout mismatch");
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].size() != b[k].size()) throw Error("accumulate: shape mismatch in " + a[k].name);
    for (Eigen::Index i = 0; i < a[k].size(); ++i) a[k].data[i] += b[k].data[i];
  }
}

template <class P>
std::size_t count_parameters(P& p) {
  std::size_t n = 0;
  for (auto& t : p.tensors()) n += static_cast<std::size_t>(t.size());
  return n;
}

template <class P>
bool all_finite(P& p) {
  for (auto& t : p.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (!std::isfinite(static_cast<double>(t.data[i]))) return false;
  return true;
}

/// Converts between scalar types for structurally identical parameter sets.
template <class PDst, class PSrc>
void copy_values(PDst& dst, PSrc& src) {
  auto a = dst.tensors();
  auto b = src.tensors();
  if (a.size() != b.size()) throw Error("copy_values: layout mismatch");
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].size() != b[k].size() || a[k].name != b[k].name) throw Error("copy_values: mismatch in " + a[k].name);
    for (Eigen::Index i = 0; i < a[k].size(); ++i) a[k].data[i] = static_cast<std::remove_pointer_t<decltype(a[k].data)>>(b[k].data[i]);
  }
}

}  // namespace plse

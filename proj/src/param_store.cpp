#include "refexp/param_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "refexp/binary_io.hpp"
#include "refexp/errors.hpp"

namespace refexp {

namespace {
constexpr char kMagic[4] = {'R', 'E', 'X', 'P'};
constexpr std::uint32_t kVersion = 2;
}  // namespace

Tensor& ParamStore::add(const std::string& name, Tensor tensor) {
  if (index_.count(name) != 0) {
    throw IntegrityError("checkpoint-integrity", "duplicate parameter name " + name);
  }
  index_.emplace(name, tensors_.size());
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
  return tensors_.back();
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) != 0; }

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("unknown parameter " + name);
  return tensors_[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("unknown parameter " + name);
  return tensors_[it->second];
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (Tensor& t : tensors_) t.zero_grad();
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const Tensor& t : tensors_) {
    for (double g : t.grad) sq += g * g;
  }
  return std::sqrt(sq);
}

void ParamStore::scale_grad(double factor) {
  for (Tensor& t : tensors_) {
    for (double& g : t.grad) g *= factor;
  }
}

void ParamStore::apply_sgd(double learning_rate) {
  for (Tensor& t : tensors_) {
    if (t.grad.empty()) continue;
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] -= learning_rate * t.grad[i];
  }
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ostringstream out;
  out.write(kMagic, 4);
  io::write_u32(out, kVersion);
  io::write_u64(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.tensor(i);
    io::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t extent : t.shape) io::write_u64(out, extent);
    for (double v : t.values) io::write_f64(out, v);
  }
  io::write_checked_file(path, std::move(out).str());
}

ParamStore load_checkpoint(const std::string& path) {
  std::istringstream in(io::read_checked_payload(path, "checkpoint-integrity"));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IntegrityError("checkpoint-integrity", "bad magic in " + path);
  }
  std::uint32_t version = io::read_u32(in, "checkpoint version");
  if (version != kVersion) {
    throw IntegrityError("checkpoint-integrity",
                         "unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t count = io::read_u64(in, "parameter count");
  ParamStore params;
  for (std::uint64_t p = 0; p < count; ++p) {
    std::uint32_t name_len = io::read_u32(in, "parameter name length");
    if (name_len > 4096) {
      throw IntegrityError("checkpoint-integrity", "implausible name length");
    }
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IntegrityError("checkpoint-integrity", "truncated parameter name");
    std::uint32_t rank = io::read_u32(in, "parameter rank");
    if (rank > 8) throw IntegrityError("checkpoint-integrity", "implausible rank");
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t extent = io::read_u64(in, "parameter extent");
      if (extent == 0 || extent > (1ull << 32)) {
        throw IntegrityError("checkpoint-integrity", "implausible extent");
      }
      shape[d] = static_cast<std::size_t>(extent);
      numel *= shape[d];
    }
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      try {
        values[i] = io::read_f64(in, "parameter value");
      } catch (const IoError&) {
        throw IntegrityError("checkpoint-integrity", "truncated values for " + name);
      }
    }
    params.add(name, Tensor(std::move(shape), std::move(values)));
  }
  // Trailing bytes mean the file was not produced by this writer.
  in.peek();
  if (!in.eof()) throw IntegrityError("checkpoint-integrity", "trailing bytes in " + path);
  return params;
}

}  // namespace refexp

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "bscst/gradcore.hpp"

namespace bscst::grad {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

Parameter& ParamStore::add(std::string name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("param store: duplicate name '" + name + "'");
  index_.emplace(name, params_.size());
  Parameter p;
  p.name = std::move(name);
  p.grad = Tensor(init.rows, init.cols);
  p.adam.m = Tensor(init.rows, init.cols);
  p.adam.v = Tensor(init.rows, init.cols);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParamStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("param store: no parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& ParamStore::get(std::string_view name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

std::vector<double> ParamStore::flat_grad() const {
  std::vector<double> out;
  out.reserve(num_scalars());
  for (const auto& p : params_) out.insert(out.end(), p.grad.data.begin(), p.grad.data.end());
  return out;
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p.grad.data) s += g * g;
  return std::sqrt(s);
}

void adam_step(ParamStore& store, const AdamConfig& c) {
  for (auto& p : store) {
    auto& st = p.adam;
    ++st.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      st.m.data[i] = c.beta1 * st.m.data[i] + (1.0 - c.beta1) * g;
      st.v.data[i] = c.beta2 * st.v.data[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = st.m.data[i] / bc1;
      const double v_hat = st.v.data[i] / bc2;
      p.value.data[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
  store.zero_grad();
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "BSCST1";
constexpr std::size_t kMagicLen = 6;

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

void put_doubles(std::string& buf, const std::vector<double>& v) {
  buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(std::vector<double>& out) {
    need(out.size() * sizeof(double));
    std::memcpy(out.data(), buf_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw std::runtime_error("checkpoint: truncated record");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& buf, std::size_t len) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(len)));
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::string buf(kMagic, kMagicLen);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    put<std::uint32_t>(buf, 2);
    put<std::uint64_t>(buf, p.value.rows);
    put<std::uint64_t>(buf, p.value.cols);
    put_doubles(buf, p.value.data);
  }
  for (const auto& p : store) {
    put<std::uint64_t>(buf, p.adam.step);
    put_doubles(buf, p.adam.m.data);
    put_doubles(buf, p.adam.v.data);
  }
  put<std::uint32_t>(buf, crc_of(buf, buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < kMagicLen + 8 || buf.compare(0, kMagicLen, kMagic) != 0)
    throw std::runtime_error("checkpoint " + path.string() + ": bad header");
  const std::size_t body = buf.size() - sizeof(std::uint32_t);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + body, sizeof stored_crc);
  if (stored_crc != crc_of(buf, body)) throw std::runtime_error("checkpoint " + path.string() + ": CRC mismatch");

  Reader r(buf, body);
  r.bytes(kMagicLen);
  const auto count = r.get<std::uint32_t>();
  if (count != store.size())
    throw std::runtime_error("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                             std::to_string(store.size()));
  // Parse into scratch first so a bad file leaves the store untouched.
  std::vector<std::pair<Parameter*, Tensor>> values;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::uint64_t> dims(rank);
    for (auto& d : dims) d = r.get<std::uint64_t>();
    if (!store.contains(name)) throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
    Parameter& p = store.get(name);
    const std::uint64_t rows = rank == 2 ? dims[0] : 1;
    const std::uint64_t cols = rank == 2 ? dims[1] : (rank == 1 ? dims[0] : 1);
    if (rank > 2 || rows != p.value.rows || cols != p.value.cols)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    Tensor t(rows, cols);
    r.doubles(t.data);
    values.emplace_back(&p, std::move(t));
  }
  std::vector<AdamState> states;
  for (auto& [p, t] : values) {
    AdamState st;
    st.step = r.get<std::uint64_t>();
    st.m = Tensor(t.rows, t.cols);
    st.v = Tensor(t.rows, t.cols);
    r.doubles(st.m.data);
    r.doubles(st.v.data);
    states.push_back(std::move(st));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  for (std::size_t i = 0; i < values.size(); ++i) {
    Parameter& p = *values[i].first;
    p.value = std::move(values[i].second);
    p.adam = std::move(states[i]);
    p.grad = Tensor(p.value.rows, p.value.cols);
  }
}

}  // namespace bscst::grad

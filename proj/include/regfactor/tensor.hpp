#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace regfactor {

using Shape = std::vector<int64_t>;

// Cache-line aligned storage. Vectorized kernels choose their peeling by address, so a
// fixed alignment keeps results independent of where the allocator put a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. 4-D data uses NCHW layout.
///
/// A tensor is a plain value: copying copies the data and the gradient.
/// The gradient buffer is absent until first requested or accumulated.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    int64_t dim(size_t axis) const;
    size_t numel() const { return data_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // NCHW element access; no bounds checks.
    double& at(int64_t n, int64_t c, int64_t h, int64_t w);
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const;

    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    // Allocates a zero gradient on first use.
    std::span<double> grad();
    std::span<const double> grad() const { return grad_; }
    void zero_grad();
    void clear_grad() { grad_.clear(); }

    // Throws NumericError naming `where` if any element is NaN or infinite.
    void check_finite(std::string_view where) const;

    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Buffer data_;
    Buffer grad_;
    bool requires_grad_ = false;
};

}  // namespace regfactor

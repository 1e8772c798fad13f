# Licensed under the GPL. See License.txt in the project root for license information.

"""
Taylor expansion approximations of non-local attention, the convolutional blocks around them and the
LabNet/RealNet super-resolution networks, written against numpy with hand derived backward passes.
"""

//! The pipeline stage's input queue. Frames and commands share one FIFO so
//! commands stay ordered with the frames around them; only frames count
//! against the capacity and only frames are ever dropped.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub enum Entry<F, C> {
    Frame(F),
    Command(C),
}

#[derive(Debug)]
pub enum Pop<F, C> {
    Item(Entry<F, C>),
    Timeout,
    Closed,
}

#[derive(Debug)]
struct State<F, C> {
    items: VecDeque<Entry<F, C>>,
    frames: usize,
    closed: bool,
}

#[derive(Debug)]
pub struct PipelineQueue<F, C> {
    state: Mutex<State<F, C>>,
    ready: Condvar,
    space: Condvar,
    capacity: usize,
    lossless: bool,
}

impl<F, C> PipelineQueue<F, C> {
    /// `capacity` bounds queued frames. With `lossless` set, a full queue
    /// blocks the producer instead of dropping the oldest frame.
    pub fn new(capacity: usize, lossless: bool) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            state: Mutex::new(State {
                items: VecDeque::new(),
                frames: 0,
                closed: false,
            }),
            ready: Condvar::new(),
            space: Condvar::new(),
            capacity,
            lossless,
        }
    }

    /// Returns the number of frames dropped to make room (0 or 1).
    pub fn push_frame(&self, frame: F) -> usize {
        let mut s = self.state.lock().expect("queue lock");
        if self.lossless {
            while s.frames >= self.capacity && !s.closed {
                s = self.space.wait(s).expect("queue lock");
            }
        }
        if s.closed {
            return 0;
        }
        let mut dropped = 0;
        if s.frames >= self.capacity {
            if let Some(i) = s.items.iter().position(|e| matches!(e, Entry::Frame(_))) {
                s.items.remove(i);
                s.frames -= 1;
                dropped = 1;
            }
        }
        s.items.push_back(Entry::Frame(frame));
        s.frames += 1;
        self.ready.notify_one();
        dropped
    }

    pub fn push_command(&self, command: C) {
        let mut s = self.state.lock().expect("queue lock");
        if s.closed {
            return;
        }
        s.items.push_back(Entry::Command(command));
        self.ready.notify_one();
    }

    /// Waits up to `timeout` for the next entry. Entries queued before
    /// [`close`](Self::close) are still delivered.
    pub fn pop(&self, timeout: Duration) -> Pop<F, C> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().expect("queue lock");
        loop {
            if let Some(e) = s.items.pop_front() {
                if matches!(e, Entry::Frame(_)) {
                    s.frames -= 1;
                    self.space.notify_one();
                }
                return Pop::Item(e);
            }
            if s.closed {
                return Pop::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return Pop::Timeout;
            }
            s = self.ready.wait_timeout(s, deadline - now).expect("queue lock").0;
        }
    }

    pub fn close(&self) {
        let mut s = self.state.lock().expect("queue lock");
        s.closed = true;
        self.ready.notify_all();
        self.space.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("queue lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
